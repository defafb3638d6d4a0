"""Finite-difference gradient checks shared by the test modules."""
import numpy as np

from shiftfold.numkit import SeededRng, finite_diff_grad, relative_error


# Absolute floor for parameters whose exact gradient is zero; round-off in the
# central difference is ~1e-10 for these test losses.
GRAD_FLOOR = 1e-5


def check_layer_grads(net_or_layer, x, rng_seed=0, train=True, tol=1e-4):
    """Compare analytic input/param grads of ``sum(w * out)`` against central differences."""
    proj_rng = np.random.default_rng(99)
    out, _ = net_or_layer.forward(x, train=train, rng=SeededRng(rng_seed))
    weights = proj_rng.standard_normal(out.shape)

    def loss_at(inp):
        o, _ = net_or_layer.forward(inp, train=train, rng=SeededRng(rng_seed))
        return float(np.sum(o * weights))

    out, cache = net_or_layer.forward(x, train=train, rng=SeededRng(rng_seed))
    grad_in, grads = net_or_layer.backward(cache, weights)
    errors = {"input": relative_error(grad_in, finite_diff_grad(loss_at, x), GRAD_FLOOR)}
    params = net_or_layer.params() if callable(getattr(net_or_layer, "params", None)) else net_or_layer.params
    for name, p in params.items():
        def loss_p(value, p=p):
            saved = p.copy()
            p[...] = value
            try:
                return loss_at(x)
            finally:
                p[...] = saved
        fd = finite_diff_grad(loss_p, p.copy())
        errors[name] = relative_error(grads.get(name, np.zeros_like(p)), fd, GRAD_FLOOR)
    for name, err in errors.items():
        assert err < tol, f"{name}: relative error {err:.2e}"
    return errors
