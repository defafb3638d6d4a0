import numpy as np
import pytest

from gradcheck import GRAD_FLOOR
from shiftfold.numkit import SeededRng, finite_diff_grad, relative_error
from shiftfold.vae import (
    LatentPosterior,
    VaeConfig,
    build_vae,
    elbo_loss,
    extract_latents,
    gaussian_kl,
    load_vae,
    read_latents_csv,
    reparameterize,
    train_vae,
    write_latents_csv,
)


def images(n, shape=(1, 6, 6), seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, (n,) + shape)


def test_conv_architecture_shapes():
    model = build_vae(VaeConfig(arch="conv"), SeededRng(0))
    shapes = []
    shape = (1, 28, 28)
    for layer in model.encoder.layers:
        shape = layer.output_shape(shape)
        shapes.append(shape)
    assert (64, 14, 14) in shapes and (128, 7, 7) in shapes and (1024,) in shapes
    assert shapes[-1] == (124,)
    shape, dec_shapes = (62,), []
    for layer in model.decoder.layers:
        shape = layer.output_shape(shape)
        dec_shapes.append(shape)
    assert dec_shapes[0] == (1024,)
    assert (128, 7, 7) in dec_shapes and (64, 14, 14) in dec_shapes
    assert dec_shapes[-1] == (1, 28, 28)


def test_encode_shapes_and_determinism():
    model = build_vae(VaeConfig(), SeededRng(1))
    x = images(5, (1, 28, 28))
    post = model.encode(x)
    assert post.mu.shape == (5, 62) and post.logvar.shape == (5, 62)
    again = model.encode(x)
    assert post.mu.tobytes() == again.mu.tobytes()
    head = model.encoder.layers[-1]
    head.params["weight"][...] = 0.0
    head.params["bias"][...] = 0.0
    zero = model.encode(x)
    assert not np.any(zero.mu) and not np.any(zero.logvar)
    with pytest.raises(ValueError):
        model.encode(images(2, (1, 6, 6)))


def test_decoder_outputs_probabilities():
    model = build_vae(VaeConfig(arch="conv", image_shape=(1, 8, 8), latent_dim=3, conv_channels=(2, 3), fc_units=5),
                      SeededRng(0))
    out = model.decode(np.random.default_rng(0).standard_normal((4, 3)))
    assert out.shape == (4, 1, 8, 8)
    assert np.all((out > 0) & (out < 1))


def test_reparameterize_examples():
    post = LatentPosterior(mu=np.array([[0.5, -1.0]]), logvar=np.array([[0.3, 2.0]]))
    np.testing.assert_array_equal(reparameterize(post, eps=np.zeros((1, 2))), post.mu)
    tight = LatentPosterior(mu=post.mu, logvar=np.full((1, 2), -50.0))
    z = reparameterize(tight, SeededRng(0))
    assert np.max(np.abs(z - post.mu)) <= 1e-10
    n = 100_000
    wide = LatentPosterior(mu=np.ones((n, 1)), logvar=np.zeros((n, 1)))
    z = reparameterize(wide, SeededRng(3))
    assert abs(z.mean() - 1.0) < 4.0 / np.sqrt(n)


def test_gaussian_kl_closed_form():
    assert gaussian_kl(np.zeros((1, 4)), np.zeros((1, 4)))[0] == 0.0
    assert gaussian_kl(np.ones((1, 1)), np.zeros((1, 1)))[0] == pytest.approx(0.5)
    g = np.random.default_rng(0)
    kl = gaussian_kl(g.standard_normal((200, 5)), g.standard_normal((200, 5)))
    assert np.all(kl > 0)


def test_loss_bounds_reconstruction():
    model = build_vae(VaeConfig(image_shape=(1, 6, 6), latent_dim=3, hidden=8), SeededRng(0))
    loss, _, parts = elbo_loss(model, images(4), SeededRng(1))
    assert loss >= parts["reconstruction"]
    assert loss == pytest.approx(parts["reconstruction"] + parts["kl"])


def test_pixels_out_of_range():
    model = build_vae(VaeConfig(image_shape=(1, 6, 6), latent_dim=2, hidden=4), SeededRng(0))
    with pytest.raises(ValueError):
        elbo_loss(model, images(3) + 1.5, SeededRng(0))


def _elbo_fd_check(config, x, seed=0):
    model = build_vae(config, SeededRng(seed))
    for p in model.params().values():
        p *= 0.5
    eps = np.random.default_rng(5).standard_normal((len(x), config.latent_dim))
    _, grads, _ = elbo_loss(model, x, eps=eps)
    params = model.params()
    worst = 0.0
    for name, p in params.items():
        def f(value, p=p):
            saved = p.copy()
            p[...] = value
            try:
                return elbo_loss(model, x, eps=eps)[0]
            finally:
                p[...] = saved
        err = relative_error(grads[name], finite_diff_grad(f, p.copy()), GRAD_FLOOR)
        assert err < 1e-4, f"{name}: {err:.2e}"
        worst = max(worst, err)
    return worst


def test_elbo_gradient_dense_toy():
    _elbo_fd_check(VaeConfig(image_shape=(1, 6, 6), latent_dim=3, hidden=7), images(4))


@pytest.mark.parametrize("likelihood", ["bernoulli", "gaussian"])
def test_elbo_gradient_conv_toy(likelihood):
    config = VaeConfig(arch="conv", image_shape=(1, 8, 8), latent_dim=2, conv_channels=(2, 3), fc_units=4,
                       likelihood=likelihood)
    _elbo_fd_check(config, images(4, (1, 8, 8)))


def test_train_zero_epochs_is_init():
    config = VaeConfig(image_shape=(1, 6, 6), latent_dim=2, hidden=4, epochs=0, batch_size=4)
    trained = train_vae(images(10), config, SeededRng(3))
    fresh = build_vae(config, SeededRng(3).child("init"))
    for k, v in fresh.state_dict().items():
        assert trained.state_dict()[k].tobytes() == v.tobytes()
    assert trained.loss_trace == []


def _blob_images(n, seed=0):
    g = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:8, 0:8]
    centers = g.integers(1, 7, size=(n, 2))
    out = np.exp(-((yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2) / 3.0)
    return out[:, None]


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    config = VaeConfig(image_shape=(1, 8, 8), latent_dim=4, hidden=32, epochs=30, batch_size=50)
    data = _blob_images(500)
    a = train_vae(data, config, SeededRng(11))
    b = train_vae(data, config, SeededRng(11))
    assert a.loss_trace[-1] < a.loss_trace[0]
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    assert (tmp_path / "a" / "params.bin").read_bytes() == (tmp_path / "b" / "params.bin").read_bytes()
    loaded = load_vae(tmp_path / "a")
    assert extract_latents(loaded, data[:7]).tobytes() == extract_latents(a, data[:7]).tobytes()


def test_too_few_instances():
    config = VaeConfig(image_shape=(1, 6, 6), latent_dim=2, hidden=4, epochs=1, batch_size=8)
    with pytest.raises(ValueError):
        train_vae(images(10), config, SeededRng(0))


def test_extract_latents_order_and_duplicates(tmp_path):
    model = build_vae(VaeConfig(image_shape=(1, 6, 6), latent_dim=3, hidden=5), SeededRng(2))
    x = images(6)
    z = extract_latents(model, x, batch_size=4)
    assert z.shape == (6, 3)
    perm = np.array([3, 0, 5, 1, 2, 4])
    np.testing.assert_array_equal(extract_latents(model, x[perm], batch_size=4), z[perm])
    dup = extract_latents(model, x[[2, 2]])
    np.testing.assert_array_equal(dup[0], dup[1])
    write_latents_csv(tmp_path / "z.csv", z, index=np.arange(10, 16))
    back, index = read_latents_csv(tmp_path / "z.csv")
    np.testing.assert_array_equal(back, z)
    np.testing.assert_array_equal(index, np.arange(10, 16))
