"""Shift-inducing cross-validation folds.

Each class is embedded by its own VAE and clustered into K pseudo-subdomains
by a VGMM; fold k is the union over classes of cluster k.  Rotating the test
fold over k then evaluates every model on a pseudo-subdomain it never saw.
A stratified random splitter gives the conventional baseline.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numkit import SeededRng
from .vae import VaeConfig, extract_latents, train_vae
from .vgmm import SliceClustering, cluster_slice

log = logging.getLogger(__name__)


@dataclass
class CvConfig:
    K: int = 5
    repeat: int = 1
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")
        if self.repeat < 1:
            raise ValueError("repeat must be at least 1")


@dataclass
class ClassClusterAssignment:
    """Cluster id per instance of each class; ``members[c]`` are sorted global indices."""
    members: list
    clusters: list
    K: int
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        for c, (idx, cl) in enumerate(zip(self.members, self.clusters)):
            if len(idx) != len(cl):
                raise ValueError(f"class {c}: {len(idx)} instances but {len(cl)} cluster ids")
            if len(cl) and (np.min(cl) < 0 or np.max(cl) >= self.K):
                raise ValueError(f"class {c}: cluster ids outside [0, {self.K})")


@dataclass
class FoldAssignment:
    index: np.ndarray  # global instance indices, ascending
    labels: np.ndarray
    folds: np.ndarray
    K: int
    seed: int = 0
    repeat: int = 0

    def members(self, k) -> np.ndarray:
        return self.index[self.folds == k]

    def validate(self, n_total: int | None = None) -> None:
        if len(np.unique(self.index)) != len(self.index):
            raise ValueError("an instance appears in more than one fold")
        if n_total is not None and not np.array_equal(np.sort(self.index), np.arange(n_total)):
            raise ValueError("folds do not cover every instance exactly once")
        if np.any((self.folds < 0) | (self.folds >= self.K)):
            raise ValueError("fold id out of range")
        classes = np.unique(self.labels)
        for k in range(self.K):
            present = np.unique(self.labels[self.folds == k])
            if len(present) != len(classes):
                raise ValueError(f"fold {k} is missing classes {sorted(set(classes) - set(present))}")

    def class_proportions(self) -> np.ndarray:
        """Row k holds the class distribution of fold k."""
        C = int(self.labels.max()) + 1
        counts = np.zeros((self.K, C))
        np.add.at(counts, (self.folds, self.labels), 1.0)
        return counts / np.maximum(counts.sum(axis=1, keepdims=True), 1.0)


def canonicalize(members, clusters, K) -> np.ndarray:
    """Re-index clusters by descending size, ties broken by the smallest global index."""
    sizes = np.bincount(clusters, minlength=K)
    first = np.full(K, np.iinfo(np.int64).max)
    np.minimum.at(first, clusters, np.asarray(members, dtype=np.int64))
    order = sorted(range(K), key=lambda k: (-sizes[k], first[k]))
    remap = np.empty(K, dtype=np.int64)
    remap[order] = np.arange(K)
    return remap[clusters]


def class_slices(labels):
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == c) for c in range(int(labels.max()) + 1)]


def embed_classes(images, labels, vae_config: VaeConfig, rng: SeededRng, threads: int = 1):
    """Train one VAE per class; returns (members, latents) lists indexed by class."""
    members = class_slices(labels)

    def run(c):
        model = train_vae(images[members[c]], vae_config, rng.child("class", c, "vae"))
        return extract_latents(model, images[members[c]])

    latents = _map(run, range(len(members)), threads)
    return members, latents


def cluster_classes(members, latents, K: int, rng: SeededRng, threads: int = 1,
                    canonical: bool = True, vgmm_options: dict | None = None) -> ClassClusterAssignment:
    """``vgmm_options`` are passed to ``cluster_slice`` (max_iter, tol, max_restarts, n_init)."""
    for c, idx in enumerate(members):
        if len(idx) < 10 * K:
            raise ValueError(f"class {c} has {len(idx)} instances; at least {10 * K} needed for K={K}")

    def run(c):
        return cluster_slice(latents[c], K, rng.child("class", c, "vgmm"), **(vgmm_options or {}))

    fits: list[SliceClustering] = _map(run, range(len(members)), threads)
    clusters = []
    diagnostics = []
    for c, fit in enumerate(fits):
        labels = canonicalize(members[c], fit.labels, K) if canonical else fit.labels
        clusters.append(labels)
        diagnostics.append({"class": c, "restarts": fit.restarts, "kmeans_fallback": fit.fallback,
                            "reduced_dim": fit.reduced_dim})
        if fit.fallback:
            log.warning("class %d used the k-means fallback", c)
    return ClassClusterAssignment(members=list(members), clusters=clusters, K=K, diagnostics=diagnostics)


def vgmm_vae_split(images, labels, K: int, vae_config: VaeConfig, rng: SeededRng,
                   threads: int = 1, vgmm_options: dict | None = None):
    """Per-class VAE embedding followed by per-class VGMM clustering.

    Returns ``(assignment, latents)`` where ``latents[c]`` are the posterior
    means of class ``c`` in ``assignment.members[c]`` order.
    """
    labels = np.asarray(labels)
    for c, idx in enumerate(class_slices(labels)):
        if len(idx) < 10 * K:
            raise ValueError(f"class {c} has {len(idx)} instances; at least {10 * K} needed for K={K}")
    members, latents = embed_classes(images, labels, vae_config, rng, threads)
    return cluster_classes(members, latents, K, rng, threads, vgmm_options=vgmm_options), latents


def _map(fn, items, threads):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _relative_key(perms):
    """Fold-set identity is unchanged when every class is relabelled by the same permutation."""
    inv0 = np.argsort(perms[0])
    return tuple(tuple(inv0[p]) for p in perms)


def merge(assign: ClassClusterAssignment, repeat: int = 1, rng: SeededRng | None = None,
          seed: int = 0) -> list[FoldAssignment]:
    """Fold k is the union over classes of cluster k.

    Repeat 0 uses the cluster ids as given.  Further repeats permute cluster
    ids independently per class, redrawing until the fold-set is new.
    """
    K = assign.K
    C = len(assign.members)
    if repeat > permutation_count(K, C):
        raise ValueError(f"only {permutation_count(K, C)} distinct fold-sets exist")
    rng = rng if rng is not None else SeededRng(seed)
    index = np.concatenate(assign.members)
    labels = np.concatenate([np.full(len(m), c) for c, m in enumerate(assign.members)])
    order = np.argsort(index, kind="stable")
    out = []
    perms = [np.arange(K)] * C
    seen = {_relative_key(perms)}
    for r in range(repeat):
        attempt = 0
        while r > 0:
            draw = rng.child("merge", r, attempt)
            perms = [draw.child("class", c).permutation(K) for c in range(C)]
            if _relative_key(perms) not in seen:
                seen.add(_relative_key(perms))
                break
            attempt += 1
        folds = np.concatenate([perms[c][cl] for c, cl in enumerate(assign.clusters)])
        out.append(FoldAssignment(index=index[order], labels=labels[order], folds=folds[order], K=K,
                                  seed=rng.seed, repeat=r))
    return out


def random_split_baseline(labels, K: int, rng: SeededRng) -> FoldAssignment:
    """Class-stratified random partition into K folds of near-equal size."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n < K:
        raise ValueError(f"need at least K={K} instances")
    folds = np.empty(n, dtype=np.int64)
    counter = 0
    for c, idx in enumerate(class_slices(labels)):
        shuffled = idx[rng.child("class", c).permutation(len(idx))]
        folds[shuffled] = (counter + np.arange(len(idx))) % K
        counter += len(idx)
    return FoldAssignment(index=np.arange(n), labels=labels, folds=folds, K=K, seed=rng.seed)


def _largest_remainder(counts, total):
    quota = counts * (total / counts.sum()) if counts.sum() else counts * 0.0
    base = np.floor(quota).astype(np.int64)
    short = int(total - base.sum())
    order = np.lexsort((np.arange(len(counts)), -(quota - base)))
    base[order[:short]] += 1
    return base


def make_train_val_test(fa: FoldAssignment, k: int, val_fraction: float, rng: SeededRng):
    """Test is fold k; the rest is split train/validation, stratified by class."""
    if fa.K < 2:
        raise ValueError("need at least two folds")
    if not 0 <= k < fa.K:
        raise ValueError(f"fold index {k} outside [0, {fa.K})")
    test = np.sort(fa.members(k))
    rest = fa.folds != k
    rest_index = fa.index[rest]
    rest_labels = fa.labels[rest]
    C = int(fa.labels.max()) + 1
    counts = np.bincount(rest_labels, minlength=C)
    n_val = _largest_remainder(counts, int(round(val_fraction * len(rest_index))))
    val = []
    for c in range(C):
        idx = rest_index[rest_labels == c]
        pick = rng.child("val", c).permutation(len(idx))[:n_val[c]]
        val.append(idx[pick])
    val = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=np.int64)
    train = np.setdiff1d(rest_index, val)
    return train, val, test


def write_folds_csv(path, fa: FoldAssignment) -> None:
    order = np.argsort(fa.index, kind="stable")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance_index", "class_label", "fold_id"])
        for i in order:
            writer.writerow([int(fa.index[i]), int(fa.labels[i]), int(fa.folds[i])])


def read_folds_csv(path, K: int | None = None, repeat: int = 0) -> FoldAssignment:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["instance_index", "class_label", "fold_id"]:
            raise ValueError(f"unexpected fold CSV header {header}")
        rows = np.array([[int(v) for v in r] for r in reader], dtype=np.int64).reshape(-1, 3)
    K = int(rows[:, 2].max()) + 1 if K is None else K
    return FoldAssignment(index=rows[:, 0], labels=rows[:, 1], folds=rows[:, 2], K=K, repeat=repeat)


def fold_sizes(fa: FoldAssignment) -> np.ndarray:
    return np.bincount(fa.folds, minlength=fa.K)


def permutation_count(K: int, C: int) -> int:
    return math.factorial(K) ** max(C - 1, 0)

