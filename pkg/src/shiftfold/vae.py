"""Variational autoencoder used to embed each class slice before clustering.

Two architectures are available:

``conv``
    conv 4x4/2 (64) -> leaky -> conv 4x4/2 (128) -> BN -> leaky -> fc 1024 -> BN
    -> leaky -> fc 2*d_z, and the mirrored decoder ending in two 4x4/2
    transposed convolutions.  Padding 1 gives 28 -> 14 -> 7.
``dense``
    flatten -> fc ``hidden`` -> leaky -> fc 2*d_z, decoder fc ``hidden`` -> relu
    -> fc pixels.

The decoder networks emit logits; the terminal sigmoid is applied by
:meth:`VaeModel.decode` and folded into the reconstruction loss.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .autonet import (
    Adam,
    BatchNorm,
    Conv2d,
    Deconv2d,
    Dense,
    Flatten,
    LeakyReLU,
    ReLU,
    Reshape,
    Sequential,
    load_checkpoint,
    save_checkpoint,
)
from .numkit import SeededRng

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class VaeConfig:
    arch: str = "dense"
    image_shape: tuple = (1, 28, 28)
    latent_dim: int = 62
    hidden: int = 256
    conv_channels: tuple = (64, 128)
    fc_units: int = 1024
    likelihood: str = "bernoulli"
    gaussian_sigma: float = 1.0
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class LatentPosterior:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class VaeModel:
    encoder: Sequential
    decoder: Sequential
    config: VaeConfig
    loss_trace: list = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def encode(self, batch, train=False) -> LatentPosterior:
        _check_images(batch, self.config.image_shape)
        h = self.encoder(batch, train=train)
        d = self.latent_dim
        return LatentPosterior(mu=h[:, :d], logvar=h[:, d:])

    def decode(self, z, train=False) -> np.ndarray:
        return expit(self.decoder(z, train=train))

    def params(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params().items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out

    def load_state_dict(self, state) -> None:
        self.encoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
        self.decoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("decoder.")})

    def save(self, directory) -> Path:
        directory = Path(directory)
        save_checkpoint(directory, self.state_dict())
        cfg = asdict(self.config)
        lines = [f"{k} = {_fmt_cfg(v)}\n" for k, v in cfg.items()]
        (directory / "vae_config.txt").write_text("".join(lines))
        return directory


def _fmt_cfg(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def load_vae(directory) -> VaeModel:
    directory = Path(directory)
    defaults = asdict(VaeConfig())
    values = {}
    for line in (directory / "vae_config.txt").read_text().splitlines():
        key, _, raw = line.partition(" = ")
        ref = defaults[key]
        if isinstance(ref, tuple):
            values[key] = tuple(int(x) for x in raw.split(","))
        else:
            values[key] = type(ref)(raw)
    model = build_vae(VaeConfig(**values), SeededRng(0))
    model.load_state_dict(load_checkpoint(directory))
    return model


def _check_images(batch, image_shape):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(image_shape):
        raise ValueError(f"expected images of shape (m, {', '.join(map(str, image_shape))}), got {batch.shape}")


def build_vae(config: VaeConfig, rng: SeededRng) -> VaeModel:
    c, h, w = config.image_shape
    d = config.latent_dim
    if config.arch == "dense":
        pixels = c * h * w
        encoder = Sequential([
            Flatten(),
            Dense(pixels, config.hidden, rng),
            LeakyReLU(0.2),
            Dense(config.hidden, 2 * d, rng),
        ])
        decoder = Sequential([
            Dense(d, config.hidden, rng),
            ReLU(),
            Dense(config.hidden, pixels, rng),
            Reshape(config.image_shape),
        ])
    elif config.arch == "conv":
        if h % 4 or w % 4:
            raise ValueError("conv architecture needs image sides divisible by 4")
        c1, c2 = config.conv_channels
        fc = config.fc_units
        inner = (c2, h // 4, w // 4)
        flat = c2 * (h // 4) * (w // 4)
        encoder = Sequential([
            Conv2d(c, c1, 4, rng, stride=2, padding=1),
            LeakyReLU(0.2),
            Conv2d(c1, c2, 4, rng, stride=2, padding=1),
            BatchNorm(c2),
            LeakyReLU(0.2),
            Flatten(),
            Dense(flat, fc, rng),
            BatchNorm(fc),
            LeakyReLU(0.2),
            Dense(fc, 2 * d, rng),
        ])
        decoder = Sequential([
            Dense(d, fc, rng),
            BatchNorm(fc),
            ReLU(),
            Dense(fc, flat, rng),
            BatchNorm(flat),
            ReLU(),
            Reshape(inner),
            Deconv2d(c2, c1, 4, rng, stride=2, padding=1),
            BatchNorm(c1),
            ReLU(),
            Deconv2d(c1, c, 4, rng, stride=2, padding=1),
        ])
    else:
        raise ValueError(f"unknown VAE architecture {config.arch!r}")
    if encoder.output_shape(config.image_shape) != (2 * d,):
        raise AssertionError("encoder head does not produce 2 * latent_dim outputs")
    if decoder.output_shape((d,)) != tuple(config.image_shape):
        raise AssertionError("decoder does not reproduce the image shape")
    return VaeModel(encoder=encoder, decoder=decoder, config=config)


def reparameterize(post: LatentPosterior, rng: SeededRng | None = None, eps=None) -> np.ndarray:
    if eps is None:
        eps = rng.standard_normal(post.mu.shape)
    return post.mu + np.exp(0.5 * post.logvar) * eps


def gaussian_kl(mu, logvar) -> np.ndarray:
    """Per-instance ``KL(N(mu, exp(logvar)) || N(0, I))``."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)


def _reconstruction(logits, x, config):
    """Per-instance reconstruction NLL and its gradient w.r.t. logits."""
    if config.likelihood == "bernoulli":
        nll = np.logaddexp(0.0, logits) - x * logits
        grad = expit(logits) - x
    elif config.likelihood == "gaussian":
        s2 = config.gaussian_sigma ** 2
        xhat = expit(logits)
        nll = 0.5 * ((x - xhat) ** 2 / s2 + np.log(2.0 * np.pi * s2))
        grad = (xhat - x) / s2 * xhat * (1.0 - xhat)
    else:
        raise ValueError(f"unknown likelihood {config.likelihood!r}")
    return nll.reshape(len(x), -1).sum(axis=1), grad


def elbo_loss(model: VaeModel, batch, rng: SeededRng | None = None, eps=None):
    """Negative ELBO averaged over the batch, with gradients for every parameter.

    Returns ``(loss, grads, parts)``; ``parts`` holds the ``reconstruction``
    and ``kl`` batch means.  Pass ``eps`` to pin the reparameterization noise.
    """
    _check_images(batch, model.config.image_shape)
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    m = batch.shape[0]
    d = model.latent_dim
    h, enc_caches = model.encoder.forward(batch, train=True)
    mu, logvar = h[:, :d], h[:, d:]
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    logits, dec_caches = model.decoder.forward(z, train=True)

    rec, grad_logits = _reconstruction(logits, batch, model.config)
    kl = gaussian_kl(mu, logvar)
    loss = float(np.mean(rec) + np.mean(kl))

    grad_z, dec_grads = model.decoder.backward(dec_caches, grad_logits / m)
    grad_mu = grad_z + mu / m
    grad_logvar = grad_z * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / m
    _, enc_grads = model.encoder.backward(enc_caches, np.concatenate([grad_mu, grad_logvar], axis=1))

    grads = {f"encoder.{k}": v for k, v in enc_grads.items()}
    grads.update({f"decoder.{k}": v for k, v in dec_grads.items()})
    parts = {"reconstruction": float(np.mean(rec)), "kl": float(np.mean(kl))}
    return loss, grads, parts


def train_vae(images, config: VaeConfig, rng: SeededRng) -> VaeModel:
    """Fit a fresh VAE with Adam; ``model.loss_trace`` holds per-epoch mean loss."""
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if config.epochs > 0 and n < 2 * config.batch_size:
        raise ValueError(f"need at least {2 * config.batch_size} instances, got {n}")
    model = build_vae(config, rng.child("init"))
    opt = Adam(model.params(), lr=config.lr)
    shuffle_rng = rng.child("shuffle")
    noise_rng = rng.child("noise")
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            loss, grads, _ = elbo_loss(model, images[idx], noise_rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite VAE loss at epoch {epoch}, batch {b}")
            opt.step(grads)
            total += loss * len(idx)
            count += len(idx)
        model.loss_trace.append(total / count)
        log.debug("vae epoch %d loss %.4f", epoch, model.loss_trace[-1])
    return model


def extract_latents(model: VaeModel, images, batch_size: int = 512) -> np.ndarray:
    """Posterior means for every instance, in input order (eval mode)."""
    images = np.asarray(images, dtype=np.float64)
    out = [model.encode(images[s:s + batch_size]).mu for s in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, model.latent_dim))
    return np.concatenate(out, axis=0)


def write_latents_csv(path, latents, index=None) -> None:
    """One row per instance; optional leading ``instance_index`` column."""
    latents = np.asarray(latents)
    header = [f"z{j}" for j in range(latents.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow((["instance_index"] if index is not None else []) + header)
        for i, row in enumerate(latents):
            values = [repr(float(v)) for v in row]
            writer.writerow(([int(index[i])] if index is not None else []) + values)


def read_latents_csv(path):
    """Returns ``(latents, index)``; ``index`` is ``None`` without that column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_index = header[0] == "instance_index"
    data = np.array([[float(v) for v in r[1 if has_index else 0:]] for r in body]).reshape(len(body), -1)
    index = np.array([int(r[0]) for r in body], dtype=np.int64) if has_index else None
    return data, index
