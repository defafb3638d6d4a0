"""Bayes-by-backprop layers with the local reparameterization trick.

Each weight has a Gaussian posterior ``N(mu, sigma^2)`` with
``sigma = softplus(rho)``.  Instead of sampling weights, a layer samples its
pre-activations directly::

    b = a @ mu + zeta * sqrt(a^2 @ sigma^2),   zeta ~ N(0, 1)

with one ``zeta`` per (instance, output unit).  Convolutions use the same
rule with ``conv`` in place of the matrix product.  Biases are point
estimates.  The KL term against a zero-mean Gaussian prior is estimated
from Monte Carlo weight samples, not in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autonet import Sequential, softmax, softmax_xent
from .autonet import conv as convk
from .autonet.layers import Layer, fan_in_uniform
from .numkit import NonFiniteError, SeededRng

SIGMA_INIT = 0.05


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass
class GaussianWeightPosterior:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu {self.mu.shape} and rho {self.rho.shape} differ")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)


@dataclass(frozen=True)
class PriorSpec:
    sigma: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("prior standard deviation must be positive")


@dataclass
class FreeEnergyLoss:
    nll: float
    kl: float
    kl_weight: float

    @property
    def total(self) -> float:
        return self.nll + self.kl_weight * self.kl


def _safe_sqrt(var):
    std = np.sqrt(var)
    inv = np.divide(0.5, std, out=np.zeros_like(std), where=std > 0)
    return std, inv


def local_reparam_moments(a, mu, sigma):
    """Analytic mean and variance of the dense pre-activations."""
    return a @ mu, (a * a) @ (sigma * sigma)


def local_reparam_dense(a, post: GaussianWeightPosterior, rng: SeededRng, zeta=None):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != post.mu.shape[0]:
        raise ValueError(f"input {a.shape} does not match weights {post.mu.shape}")
    mean, var = local_reparam_moments(a, post.mu, post.sigma)
    if zeta is None:
        zeta = rng.standard_normal(mean.shape)
    return mean + zeta * np.sqrt(var)


def local_reparam_conv(a, post: GaussianWeightPosterior, rng: SeededRng, stride=1, padding=0, zeta=None):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 4 or a.shape[1] != post.mu.shape[1]:
        raise ValueError(f"input {a.shape} does not match kernel {post.mu.shape}")
    sigma = post.sigma
    mean, _ = convk.conv2d(a, post.mu, stride, padding)
    var, _ = convk.conv2d(a * a, sigma * sigma, stride, padding)
    if zeta is None:
        zeta = rng.standard_normal(mean.shape)
    return mean + zeta * np.sqrt(var)


def dropout_alpha(p: float) -> float:
    """Gaussian-dropout noise variance ``p / (1 - p)`` matching Bernoulli dropout rate ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    return p / (1.0 - p)


def bernoulli_dropout_preactivations(a, w, p: float, rng: SeededRng):
    """``(a * d / (1 - p)) @ w`` with ``d ~ Bernoulli(1 - p)`` per input entry."""
    keep = rng.uniform(np.shape(a)) >= p
    return (a * keep / (1.0 - p)) @ w


def dropout_moments(a, w, p: float):
    alpha = dropout_alpha(p)
    return a @ w, (a * a) @ (w * w) * alpha


def _kl_terms(mu, rho, prior: PriorSpec, rng: SeededRng, samples: int):
    """MC estimate of ``KL(q || p)`` and its pathwise gradients in (mu, rho)."""
    sigma = softplus(rho)
    s2 = prior.sigma ** 2
    value = 0.0
    g_mu = np.zeros_like(mu)
    g_sigma = np.zeros_like(mu)
    for _ in range(samples):
        eps = rng.standard_normal(mu.shape)
        w = mu + sigma * eps
        # log q(w) - log p(w) with (w - mu) / sigma == eps
        value += float(np.sum(-np.log(sigma) - 0.5 * eps * eps + math.log(prior.sigma) + 0.5 * w * w / s2))
        g_mu += w / s2
        g_sigma += -1.0 / sigma + eps * w / s2
    return value / samples, g_mu / samples, g_sigma / samples * expit(rho)


def kl_mc(post: GaussianWeightPosterior, prior: PriorSpec, rng: SeededRng, samples: int = 1) -> float:
    if samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    return _kl_terms(post.mu, post.rho, prior, rng, samples)[0]


def gaussian_kl_closed_form(mu, sigma, prior_sigma: float) -> float:
    """Exact ``KL(N(mu, sigma^2) || N(0, prior_sigma^2))`` summed over entries."""
    ratio = (sigma / prior_sigma) ** 2
    return float(np.sum(0.5 * (ratio + (mu / prior_sigma) ** 2 - 1.0 - np.log(ratio))))


class BayesDense(Layer):
    kind = "bayes_dense"
    variational = (("weight_mu", "weight_rho"),)

    def __init__(self, n_in: int, n_out: int, rng: SeededRng, sigma_init: float = SIGMA_INIT):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["weight_mu"] = fan_in_uniform(rng, (n_in, n_out), n_in)
        self.params["bias"] = np.zeros(n_out)
        self.params["weight_rho"] = np.full((n_in, n_out), inverse_softplus(sigma_init))

    def forward(self, x, train=True, rng=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"bayes dense expects (m, {self.n_in}), got {x.shape}")
        mean = x @ self.params["weight_mu"] + self.params["bias"]
        if rng is None:
            return mean, (x, None, None, None)
        sigma = softplus(self.params["weight_rho"])
        std, half_inv = _safe_sqrt((x * x) @ (sigma * sigma))
        zeta = rng.standard_normal(mean.shape)
        return mean + zeta * std, (x, zeta, half_inv, sigma)

    def backward(self, cache, grad_out):
        x, zeta, half_inv, sigma = cache
        self._check_grad((x.shape[0], self.n_out), grad_out)
        grads = {"weight_mu": x.T @ grad_out, "bias": grad_out.sum(axis=0)}
        grad_in = grad_out @ self.params["weight_mu"].T
        if zeta is None:
            grads["weight_rho"] = np.zeros_like(self.params["weight_rho"])
            return grad_in, grads
        grad_var = grad_out * zeta * half_inv
        grad_in = grad_in + 2.0 * x * (grad_var @ (sigma * sigma).T)
        grad_s2 = (x * x).T @ grad_var
        grads["weight_rho"] = grad_s2 * 2.0 * sigma * expit(self.params["weight_rho"])
        return grad_in, grads

    def posterior(self) -> GaussianWeightPosterior:
        return GaussianWeightPosterior(self.params["weight_mu"], self.params["weight_rho"])

    def output_shape(self, in_shape):
        return (self.n_out,)

    def __repr__(self):
        return f"BayesDense({self.n_in}, {self.n_out})"


class BayesConv2d(Layer):
    kind = "bayes_conv2d"
    variational = (("weight_mu", "weight_rho"),)

    def __init__(self, c_in, c_out, kernel, rng: SeededRng, stride=1, padding=0, sigma_init: float = SIGMA_INIT):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        shape = (c_out, c_in, kernel, kernel)
        self.params["weight_mu"] = fan_in_uniform(rng, shape, c_in * kernel * kernel)
        self.params["bias"] = np.zeros(c_out)
        self.params["weight_rho"] = np.full(shape, inverse_softplus(sigma_init))

    def forward(self, x, train=True, rng=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"bayes conv2d expects (m, {self.c_in}, H, W), got {x.shape}")
        mean, win = convk.conv2d(x, self.params["weight_mu"], self.stride, self.padding)
        mean += self.params["bias"][None, :, None, None]
        if rng is None:
            return mean, (x, win, None, None, None, None)
        sigma = softplus(self.params["weight_rho"])
        var, win2 = convk.conv2d(x * x, sigma * sigma, self.stride, self.padding)
        std, half_inv = _safe_sqrt(var)
        zeta = rng.standard_normal(mean.shape)
        return mean + zeta * std, (x, win, win2, zeta, half_inv, sigma)

    def backward(self, cache, grad_out):
        x, win, win2, zeta, half_inv, sigma = cache
        self._check_grad((x.shape[0],) + self.output_shape(x.shape[1:]), grad_out)
        hw = x.shape[2:]
        grads = {
            "weight_mu": convk.conv2d_grad_weight(win, grad_out),
            "bias": grad_out.sum(axis=(0, 2, 3)),
        }
        grad_in = convk.conv2d_grad_input(grad_out, self.params["weight_mu"], hw, self.stride, self.padding)
        if zeta is None:
            grads["weight_rho"] = np.zeros_like(self.params["weight_rho"])
            return grad_in, grads
        grad_var = grad_out * zeta * half_inv
        grad_in = grad_in + 2.0 * x * convk.conv2d_grad_input(grad_var, sigma * sigma, hw, self.stride, self.padding)
        grad_s2 = convk.conv2d_grad_weight(win2, grad_var)
        grads["weight_rho"] = grad_s2 * 2.0 * sigma * expit(self.params["weight_rho"])
        return grad_in, grads

    def posterior(self) -> GaussianWeightPosterior:
        return GaussianWeightPosterior(self.params["weight_mu"], self.params["weight_rho"])

    def output_shape(self, in_shape):
        c, h, w = in_shape
        size = convk.conv_output_size
        return (self.c_out, size(h, self.kernel, self.stride, self.padding),
                size(w, self.kernel, self.stride, self.padding))

    def __repr__(self):
        return f"BayesConv2d({self.c_in}, {self.c_out}, k={self.kernel}, s={self.stride}, p={self.padding})"


def variational_pairs(net: Sequential):
    """Yield ``(mu_name, rho_name)`` full parameter names for every Bayesian layer."""
    for idx, layer in enumerate(net.layers):
        for mu_name, rho_name in getattr(layer, "variational", ()):
            yield f"{idx}.{mu_name}", f"{idx}.{rho_name}"


def kl_total(net: Sequential, prior: PriorSpec, rng: SeededRng, samples: int = 1):
    """Summed MC KL over all Bayesian layers, plus its gradients."""
    params = net.params()
    total, grads = 0.0, {}
    for mu_name, rho_name in variational_pairs(net):
        value, g_mu, g_rho = _kl_terms(params[mu_name], params[rho_name], prior, rng, samples)
        total += value
        grads[mu_name] = g_mu
        grads[rho_name] = g_rho
    return total, grads


def free_energy(net: Sequential, batch, labels, rng: SeededRng, samples: int = 1, kl_weight: float = 0.0,
                prior: PriorSpec = PriorSpec(), kl_samples: int = 1):
    """Per-instance variational free energy ``nll + kl_weight * kl`` and its gradients.

    ``nll`` is the batch-mean cross-entropy averaged over ``samples``
    stochastic forward passes.  The KL term is skipped entirely (no noise
    drawn, reported as 0) when ``kl_weight == 0``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    nll = 0.0
    grads: dict[str, np.ndarray] = {}
    for _ in range(samples):
        logits, caches = net.forward(batch, train=True, rng=rng)
        loss, g = softmax_xent(logits, labels)
        nll += loss
        _, sample_grads = net.backward(caches, g / samples if samples > 1 else g)
        for k, v in sample_grads.items():
            grads[k] = grads[k] + v if k in grads else v
    nll /= samples
    kl = 0.0
    if kl_weight != 0.0:
        kl, kl_grads = kl_total(net, prior, rng, kl_samples)
        for k, v in kl_grads.items():
            grads[k] = grads[k] + kl_weight * v
    result = FreeEnergyLoss(nll=float(nll), kl=float(kl), kl_weight=kl_weight)
    if not math.isfinite(result.total):
        raise NonFiniteError("free energy is not finite")
    return result, grads


def predictive_mc(net: Sequential, x, rng: SeededRng, samples: int = 10, batch_size: int = 1024):
    """Class probabilities averaged over ``samples`` stochastic forward passes."""
    if samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    chunks = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        acc = None
        for _ in range(samples):
            p = softmax(net.forward(xb, train=False, rng=rng)[0])
            acc = p if acc is None else acc + p
        chunks.append(acc / samples)
    return np.concatenate(chunks, axis=0)
