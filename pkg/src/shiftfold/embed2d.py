"""Exact t-SNE for 2-D views of latent codes.

Gaussian conditional similarities are calibrated per point to a target
perplexity, symmetrized into a joint ``P``, and matched by a Student-t kernel
in the plane through gradient descent with momentum and adaptive gains.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .numkit import NonFiniteError, SeededRng

log = logging.getLogger(__name__)

PERPLEXITY_TOL = 1e-3
MAX_SEARCH = 100


class PerplexityError(RuntimeError):
    pass


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    n_iter: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    min_gain: float = 0.01
    init_std: float = 1e-2
    max_points: int = 3000


@dataclass
class EmbeddingState:
    Y: np.ndarray
    iteration: int = 0
    gains: np.ndarray | None = None
    update: np.ndarray | None = None
    kl_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.gains is None:
            self.gains = np.ones_like(self.Y)
        if self.update is None:
            self.update = np.zeros_like(self.Y)


def squared_distances(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_entropy_bits(d, beta):
    """Entropy (bits) and normalized row for distances ``d`` (self excluded) at precision ``beta``."""
    shifted = d - d.min(axis=1, keepdims=True)
    w = np.exp(-shifted * beta[:, None])
    total = w.sum(axis=1)
    p = w / total[:, None]
    h_nats = np.log(total) + beta * np.sum(shifted * p, axis=1)
    return h_nats / np.log(2.0), p


def calibrate_perplexity(D2, perplexity: float):
    """Per-row Gaussian conditionals ``p_{j|i}`` hitting ``perplexity`` within 1e-3.

    Returns ``(P_cond, sigma)``; ``P_cond`` has a zero diagonal and unit rows.
    """
    D2 = np.asarray(D2, dtype=np.float64)
    n = len(D2)
    if not perplexity < n:
        raise ValueError(f"perplexity {perplexity} must be below the point count {n}")
    off = ~np.eye(n, dtype=bool)
    d = D2[off].reshape(n, n - 1)
    spread = np.maximum(d.mean(axis=1) - d.min(axis=1), 1e-12)
    beta = 1.0 / spread
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    target = np.log2(perplexity)
    done = np.zeros(n, dtype=bool)
    p = None
    for _ in range(MAX_SEARCH):
        h, p = _row_entropy_bits(d, beta)
        perp = 2.0 ** h
        done = np.abs(perp - perplexity) <= PERPLEXITY_TOL
        if done.all():
            break
        too_flat = (h > target) & ~done
        too_sharp = (h < target) & ~done
        lo = np.where(too_flat, beta, lo)
        hi = np.where(too_sharp, beta, hi)
        grow = np.isinf(hi)
        shrink = lo == 0
        mid = np.sqrt(np.where(grow | shrink, 1.0, lo * hi))
        new = np.where(grow, beta * 2.0, np.where(shrink, beta / 2.0, mid))
        beta = np.where(done, beta, new)
    if not done.all():
        bad = int(np.flatnonzero(~done)[0])
        raise PerplexityError(f"perplexity search failed for point {bad}")
    P = np.zeros((n, n))
    P[off] = p.reshape(-1)
    return P, np.sqrt(1.0 / (2.0 * beta))


def symmetrize(P_cond) -> np.ndarray:
    n = len(P_cond)
    return (P_cond + P_cond.T) / (2.0 * n)


def _student_t(Y):
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(P, Q) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne_gradient(P, Y):
    num, Q = _student_t(Y)
    W = (P - Q) * num
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y), Q


def tsne_step(P, state: EmbeddingState, config: TsneConfig = TsneConfig()) -> EmbeddingState:
    """One momentum + gains update; appends ``KL(P || Q)`` at the pre-step ``Y``."""
    t = state.iteration
    exag = config.exaggeration if t < config.exaggeration_iters else 1.0
    grad, Q = tsne_gradient(P * exag, state.Y)
    state.kl_trace.append(kl_divergence(P, Q))
    momentum = config.momentum if t < config.momentum_switch else config.final_momentum
    same_sign = (grad > 0) == (state.update > 0)
    state.gains = np.where(same_sign, state.gains * 0.8, state.gains + 0.2)
    np.maximum(state.gains, config.min_gain, out=state.gains)
    state.update = momentum * state.update - config.learning_rate * state.gains * grad
    state.Y = state.Y + state.update
    state.iteration = t + 1
    if not np.all(np.isfinite(state.Y)):
        raise NonFiniteError(f"t-SNE coordinates became non-finite at iteration {t}")
    return state


def affinities(X, perplexity: float) -> np.ndarray:
    P_cond, _ = calibrate_perplexity(squared_distances(X), perplexity)
    return symmetrize(P_cond)


@dataclass
class TsneResult:
    Y: np.ndarray
    index: np.ndarray  # rows of the input that were embedded
    kl_trace: list
    perplexity: float


def run_tsne(latents, config: TsneConfig = TsneConfig(), rng: SeededRng | None = None) -> TsneResult:
    """Full schedule on at most ``config.max_points`` rows (seeded subsample)."""
    X = np.asarray(latents, dtype=np.float64)
    n = len(X)
    if n < 10:
        raise ValueError(f"t-SNE needs at least 10 points, got {n}")
    rng = rng if rng is not None else SeededRng(0)
    index = np.arange(n)
    if n > config.max_points:
        index = np.sort(rng.child("subsample").choice(n, config.max_points, replace=False))
        X = X[index]
        n = len(X)
    perplexity = config.perplexity
    if perplexity > (n - 1) / 3.0:
        perplexity = (n - 1) / 3.0
        log.info("perplexity lowered to %.3g for %d points", perplexity, n)
    P = affinities(X, perplexity)
    state = EmbeddingState(Y=config.init_std * rng.child("init").standard_normal((n, 2)))
    for _ in range(config.n_iter):
        tsne_step(P, state, config)
    _, Q = _student_t(state.Y)
    state.kl_trace.append(kl_divergence(P, Q))
    return TsneResult(Y=state.Y, index=index, kl_trace=state.kl_trace, perplexity=perplexity)


def write_tsne_csv(path, Y, class_labels, fold_ids) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "class_label", "fold_id"])
        for (x, y), c, k in zip(Y, class_labels, fold_ids):
            writer.writerow([repr(float(x)), repr(float(y)), int(c), int(k)])


def read_tsne_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"x", "y", "class_label", "fold_id"}:
        raise ValueError(f"unexpected t-SNE CSV columns {list(rows[0])}")
    Y = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    labels = np.array([int(r["class_label"]) for r in rows], dtype=np.int64)
    folds = np.array([int(r["fold_id"]) for r in rows], dtype=np.int64)
    return Y, labels, folds
