"""Variational Bayesian Gaussian mixture with a Dirichlet prior on the weights
and Normal-Wishart priors on each component's mean and precision.

Coordinate ascent alternates :func:`e_step` (responsibilities) and
:func:`m_step` (conjugate posterior updates).  :func:`elbo` evaluates the
variational lower bound for any pair ``(r, post)``, so each half-sweep can be
checked for monotonicity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import ClusterError, kmeans2
from scipy.special import digamma, gammaln, logsumexp, multigammaln

from .numkit import NonFiniteError, SeededRng, cholesky, logdet_from_cholesky, spd_inverse

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class DegenerateClusteringError(RuntimeError):
    pass


@dataclass
class VgmmPrior:
    alpha0: float
    m0: np.ndarray
    beta0: float
    W0: np.ndarray
    nu0: float

    def __post_init__(self):
        self.m0 = np.asarray(self.m0, dtype=np.float64)
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        d = self.m0.shape[0]
        if self.alpha0 <= 0 or self.beta0 <= 0:
            raise ValueError("alpha0 and beta0 must be positive")
        if self.W0.shape != (d, d):
            raise ValueError(f"W0 must be {d}x{d}, got {self.W0.shape}")
        if self.nu0 <= d - 1:
            raise ValueError(f"nu0 must exceed d - 1 = {d - 1}")
        self._W0_chol = cholesky(self.W0)
        self.W0_inv = spd_inverse(self.W0)

    @property
    def dim(self) -> int:
        return self.m0.shape[0]


def default_prior(data, K: int) -> VgmmPrior:
    """Scale-aware weak prior centred on the data."""
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    cov = np.cov(data, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    W0 = spd_inverse(cov + 1e-6 * np.eye(d)) / d
    return VgmmPrior(alpha0=1.0 / K, m0=data.mean(axis=0), beta0=1.0, W0=W0, nu0=d + 2.0)


@dataclass
class VgmmPosterior:
    alpha: np.ndarray  # (K,)
    beta: np.ndarray  # (K,)
    m: np.ndarray  # (K, d)
    W: np.ndarray  # (K, d, d)
    nu: np.ndarray  # (K,)
    elbo_trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def n_components(self) -> int:
        return len(self.alpha)

    @property
    def dim(self) -> int:
        return self.m.shape[1]

    def expected_log_weights(self):
        return digamma(self.alpha) - digamma(self.alpha.sum())

    def expected_log_det(self, chols=None):
        d = self.dim
        if chols is None:
            chols = [cholesky(w) for w in self.W]
        i = np.arange(1, d + 1)
        return np.array([
            digamma((nu + 1 - i) / 2.0).sum() + d * np.log(2.0) + logdet_from_cholesky(L)
            for nu, L in zip(self.nu, chols)
        ])

    def summary(self, prior: VgmmPrior | None = None) -> str:
        """Plain-text diagnostic: per-component mass, mean norm, ELBO trace."""
        mass = self.alpha - (prior.alpha0 if prior is not None else 0.0)
        lines = [f"components {self.n_components} dim {self.dim} iterations {self.n_iter} converged {self.converged}"]
        for k in range(self.n_components):
            lines.append(f"component {k} mass {mass[k]:.6g} mean_norm {np.linalg.norm(self.m[k]):.6g}")
        lines.append("elbo " + " ".join(f"{v:.10g}" for v in self.elbo_trace))
        return "\n".join(lines) + "\n"


def _check_data(data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"data must be 2-D, got shape {data.shape}")
    if np.isnan(data).any():
        raise ValueError("data contains NaN")
    return data


def _seed_means(data, K, rng: SeededRng):
    """Farthest-point (k-means++) seeding; K=1 uses the data mean."""
    n = len(data)
    if K == 1:
        return data.mean(axis=0, keepdims=True)
    centers = [int(rng.integers(0, n))]
    d2 = np.sum((data - data[centers[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, 1, p=d2 / total)[0])
        else:
            # every point coincides with a chosen centre
            nxt = int(rng.integers(0, n))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((data - data[nxt]) ** 2, axis=1))
    return data[centers]


def init(data, K: int, prior: VgmmPrior, rng: SeededRng) -> VgmmPosterior:
    """Seed means by farthest-point sampling, then one conjugate update from
    nearest-seed hard responsibilities."""
    data = _check_data(data)
    n = len(data)
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    seeds = _seed_means(data, K, rng)
    d2 = np.sum((data[:, None, :] - seeds[None, :, :]) ** 2, axis=2)
    r = np.zeros((n, K))
    r[np.arange(n), np.argmin(d2, axis=1)] = 1.0
    return m_step(data, r, prior)


def e_step(data, post: VgmmPosterior) -> np.ndarray:
    data = _check_data(data)
    log_rho = _log_rho(data, post)
    r = np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))
    return r / r.sum(axis=1, keepdims=True)


def _log_rho(data, post):
    d = post.dim
    chols = [cholesky(w) for w in post.W]
    out = np.empty((len(data), post.n_components))
    e_logdet = post.expected_log_det(chols)
    e_logpi = post.expected_log_weights()
    for k, L in enumerate(chols):
        proj = (data - post.m[k]) @ L
        quad = d / post.beta[k] + post.nu[k] * np.sum(proj * proj, axis=1)
        out[:, k] = e_logpi[k] + 0.5 * e_logdet[k] - 0.5 * d * LOG_2PI - 0.5 * quad
    return out


def _sufficient_stats(data, r):
    Nk = r.sum(axis=0)
    safe = np.where(Nk > 0, Nk, 1.0)
    xbar = (r.T @ data) / safe[:, None]
    K, d = r.shape[1], data.shape[1]
    scatter = np.empty((K, d, d))  # N_k * S_k
    for k in range(K):
        diff = data - xbar[k]
        scatter[k] = (r[:, k, None] * diff).T @ diff
    return Nk, xbar, scatter


def m_step(data, r, prior: VgmmPrior) -> VgmmPosterior:
    data = _check_data(data)
    r = np.asarray(r, dtype=np.float64)
    Nk, xbar, scatter = _sufficient_stats(data, r)
    beta = prior.beta0 + Nk
    m = (prior.beta0 * prior.m0 + Nk[:, None] * xbar) / beta[:, None]
    W = np.empty_like(scatter)
    for k in range(len(Nk)):
        dev = xbar[k] - prior.m0
        W_inv = prior.W0_inv + scatter[k] + (prior.beta0 * Nk[k] / (prior.beta0 + Nk[k])) * np.outer(dev, dev)
        W_inv = 0.5 * (W_inv + W_inv.T)
        W[k] = spd_inverse(W_inv)
    return VgmmPosterior(alpha=prior.alpha0 + Nk, beta=beta, m=m, W=W, nu=prior.nu0 + Nk)


def _log_wishart_norm(logdet_W, nu, d):
    """log B(W, nu), the Wishart normalizer."""
    return -0.5 * nu * logdet_W - 0.5 * nu * d * np.log(2.0) - multigammaln(0.5 * nu, d)


def _log_dirichlet_norm(alpha):
    return gammaln(np.sum(alpha)) - np.sum(gammaln(alpha))


def elbo(data, r, post: VgmmPosterior, prior: VgmmPrior) -> float:
    """Variational lower bound on ``log p(data)`` at ``(r, post)``."""
    data = _check_data(data)
    r = np.asarray(r, dtype=np.float64)
    K, d = post.n_components, post.dim
    Nk, xbar, scatter = _sufficient_stats(data, r)
    chols = [cholesky(w) for w in post.W]
    logdet_W = np.array([logdet_from_cholesky(L) for L in chols])
    ln_lam = post.expected_log_det(chols)
    ln_pi = post.expected_log_weights()

    # E[ln p(X | Z, mu, Lambda)]
    e_px = 0.0
    for k in range(K):
        dx = xbar[k] - post.m[k]
        tr = np.sum(scatter[k] * post.W[k])  # N_k Tr(S_k W_k)
        e_px += 0.5 * (Nk[k] * (ln_lam[k] - d / post.beta[k] - d * LOG_2PI)
                       - post.nu[k] * tr - Nk[k] * post.nu[k] * dx @ post.W[k] @ dx)
    e_pz = float(np.sum(Nk * ln_pi))
    e_ppi = _log_dirichlet_norm(np.full(K, prior.alpha0)) + (prior.alpha0 - 1.0) * ln_pi.sum()

    # E[ln p(mu, Lambda)]
    e_pmu = 0.0
    for k in range(K):
        dm = post.m[k] - prior.m0
        e_pmu += 0.5 * (d * np.log(prior.beta0 / (2.0 * np.pi)) + ln_lam[k] - d * prior.beta0 / post.beta[k]
                        - prior.beta0 * post.nu[k] * dm @ post.W[k] @ dm)
        e_pmu += 0.5 * (prior.nu0 - d - 1) * ln_lam[k] - 0.5 * post.nu[k] * np.sum(prior.W0_inv * post.W[k])
    e_pmu += K * _log_wishart_norm(logdet_from_cholesky(prior._W0_chol), prior.nu0, d)

    with np.errstate(divide="ignore", invalid="ignore"):
        e_qz = float(np.sum(np.where(r > 0, r * np.log(r), 0.0)))
    e_qpi = float(np.sum((post.alpha - 1.0) * ln_pi)) + _log_dirichlet_norm(post.alpha)
    e_qmu = 0.0
    for k in range(K):
        entropy = (-_log_wishart_norm(logdet_W[k], post.nu[k], d) - 0.5 * (post.nu[k] - d - 1) * ln_lam[k]
                   + 0.5 * post.nu[k] * d)
        e_qmu += 0.5 * ln_lam[k] + 0.5 * d * np.log(post.beta[k] / (2.0 * np.pi)) - 0.5 * d - entropy

    value = float(e_px + e_pz + e_ppi + e_pmu - e_qz - e_qpi - e_qmu)
    if not np.isfinite(value):
        raise NonFiniteError("ELBO is not finite")
    return value


def fit(data, K: int, prior: VgmmPrior | None = None, rng: SeededRng | None = None,
        max_iter: int = 500, tol: float = 1e-6):
    """Coordinate ascent until the relative ELBO change drops below ``tol``.

    Returns ``(post, r)``; ``post.elbo_trace`` holds one value per sweep.
    """
    data = _check_data(data)
    if prior is None:
        prior = default_prior(data, K)
    rng = rng if rng is not None else SeededRng(0)
    post = init(data, K, prior, rng)
    trace = []
    r = None
    converged = False
    for it in range(max_iter):
        r = e_step(data, post)
        post = m_step(data, r, prior)
        trace.append(elbo(data, r, post, prior))
        if it > 0 and abs(trace[-1] - trace[-2]) < tol * max(1.0, abs(trace[-1])):
            converged = True
            break
    if r is None:
        r = e_step(data, post)
    post.elbo_trace = trace
    post.n_iter = len(trace)
    post.converged = converged
    return post, r


def hard_assign(r) -> np.ndarray:
    """Row argmax; ``np.argmax`` returns the first maximum, so ties go low."""
    return np.argmax(np.asarray(r), axis=1)


def pca_reduce(data, n_components: int) -> np.ndarray:
    """Project onto the top principal axes (sign fixed so the largest loading is positive)."""
    centered = data - data.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    vt = vt[:n_components]
    flip = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    return centered @ (vt * flip[:, None]).T


@dataclass
class SliceClustering:
    labels: np.ndarray
    restarts: int
    fallback: bool
    reduced_dim: int | None
    post: VgmmPosterior | None = None


def cluster_slice(data, K: int, rng: SeededRng, max_restarts: int = 5, max_iter: int = 500,
                  tol: float = 1e-6, n_init: int = 5) -> SliceClustering:
    """Fit a VGMM and return hard labels in which all K clusters are non-empty.

    Each attempt runs ``n_init`` seeded fits and keeps the best final ELBO
    among those whose K clusters are all non-empty; this avoids the
    occasional local optimum that merges two modes.  Wide slices
    (``d > n / 10``) are first projected to ``min(d, 16)`` principal axes.
    Empty clusters trigger attempts with derived seeds; after
    ``max_restarts`` of them k-means labels are used instead.
    """
    data = _check_data(data)
    n, d = data.shape
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    reduced = None
    if d > n / 10:
        reduced = min(d, 16)
        data = pca_reduce(data, reduced)
    for attempt in range(max_restarts + 1):
        fits = [fit(data, K, rng=rng.child("vgmm", attempt, i), max_iter=max_iter, tol=tol) for i in range(n_init)]
        full = [(post, hard_assign(r)) for post, r in fits if len(np.unique(hard_assign(r))) == K]
        if full:
            post, labels = max(full, key=lambda pl: pl[0].elbo_trace[-1])
            return SliceClustering(labels, attempt, False, reduced, post)
        log.info("vgmm attempt %d left empty clusters", attempt)
    log.warning("vgmm left empty clusters after %d restarts; using k-means", max_restarts)
    gen = np.random.default_rng(rng.child("kmeans").seed)
    try:
        _, labels = kmeans2(data, K, minit="++", seed=gen, missing="raise")
    except ClusterError:
        labels = np.zeros(0, dtype=np.int64)
    if len(np.unique(labels)) != K:
        raise DegenerateClusteringError(f"could not find {K} non-empty clusters")
    return SliceClustering(labels.astype(np.int64), max_restarts, True, reduced, None)
