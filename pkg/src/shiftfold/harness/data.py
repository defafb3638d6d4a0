"""Dataset ingestion: IDX files and the planted-subdomain synthetic benchmark."""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numkit import SeededRng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, H, W) in [0, 1]
    labels: np.ndarray  # (n,) contiguous class ids
    source: str
    subdomains: np.ndarray | None = None  # planted mode per instance, synthetic only

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("one label per image required")
        if len(self.labels) and set(np.unique(self.labels)) != set(range(int(self.labels.max()) + 1)):
            raise ValueError("class ids must be contiguous from 0")

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.labels)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, magic: int) -> np.ndarray:
    """Unsigned-byte IDX array with the expected big-endian ``magic``."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX arrays are written")
    magic = 0x00000800 | array.ndim
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images=images[:, None].astype(np.float64) / 255.0, labels=labels.astype(np.int64),
                   source=f"idx:{Path(images_path).name}")


def load_idx_combined(pairs) -> Dataset:
    """Concatenate several (images, labels) IDX pairs, e.g. the train and test files."""
    parts = [load_idx(img, lab) for img, lab in pairs]
    return Dataset(images=np.concatenate([p.images for p in parts]),
                   labels=np.concatenate([p.labels for p in parts]),
                   source="+".join(p.source for p in parts))


def write_dataset_idx(directory, data: Dataset) -> tuple[Path, Path]:
    """Quantize to bytes and write ``images.idx`` / ``labels.idx``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = directory / "images.idx"
    lab = directory / "labels.idx"
    write_idx(img, quantize(data.images)[:, 0])
    write_idx(lab, data.labels.astype(np.uint8))
    return img, lab


def quantize(images) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def dataset_hash(data: Dataset) -> str:
    h = hashlib.sha256()
    h.update(quantize(data.images).tobytes())
    h.update(data.labels.astype("<i8").tobytes())
    return h.hexdigest()


def _blob_basis(n_blobs, side, width):
    """Gaussian bumps on a ring around the image centre, one per planted dimension."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    radius = side * 0.3
    angles = 2.0 * np.pi * np.arange(n_blobs) / n_blobs
    basis = np.empty((n_blobs, side, side))
    for l, a in enumerate(angles):
        cy, cx = c + radius * np.sin(a), c + radius * np.cos(a)
        basis[l] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
    return basis


def planted_modes(C, K, dims, separation, class_sep, rng: SeededRng) -> np.ndarray:
    """Mode centres, shape (C, K, dims).

    Mode 0 of each class sits at the class centre; modes 1..K-1 sit
    ``separation`` away from it along random orthonormal directions (in units
    of the unit within-mode noise), so every pair of modes is at least
    ``separation`` apart.  Class centres are ``class_sep`` apart along
    orthonormal axes.
    """
    if dims < max(K - 1, C):
        raise ValueError("dims must be at least max(K - 1, C)")
    centres = np.empty((C, K, dims))
    class_axes = np.linalg.qr(rng.child("class-axes").standard_normal((dims, dims)))[0]
    for c in range(C):
        q = np.linalg.qr(rng.child("modes", c).standard_normal((dims, dims)))[0]
        centres[c] = class_sep / np.sqrt(2.0) * class_axes[:, c]
        centres[c, 1:] += separation * q[:, :K - 1].T
    return centres


def mode_counts(per_class: int, K: int) -> np.ndarray:
    """Instances per mode, proportional to K, K-1, ..., 1 (largest remainder)."""
    quota = per_class * np.arange(K, 0, -1) / (K * (K + 1) / 2)
    counts = np.floor(quota).astype(np.int64)
    counts[np.argsort(-(quota - counts), kind="stable")[:per_class - counts.sum()]] += 1
    return counts


def gen_synthetic(C: int = 3, K: int = 3, dims: int = 8, separation: float = 8.0, n: int = 3000,
                  seed: int = 0, class_sep: float = 4.0, side: int = 28, gain: float = 0.35,
                  bias: float = -1.5, blob_width: float = 3.0) -> Dataset:
    """Images whose class-conditional law is a K-mode Gaussian mixture.

    A latent ``u ~ N(mode, I)`` is rendered as ``sigmoid(bias + gain *
    sum_l u_l * blob_l)``.  Every class has exactly ``n / C`` instances; within
    a class the central mode is the largest and outer modes get smaller
    shares, so held-out modes differ in how atypical they are.
    """
    if C < 1 or K < 1 or dims < 1 or separation < 0 or side < 4:
        raise ValueError("invalid synthetic dataset settings")
    if n % C:
        raise ValueError(f"n={n} must be divisible by C={C} for exact class balance")
    if n < C * K * 10:
        raise ValueError(f"n must be at least C*K*10 = {C * K * 10}")
    rng = SeededRng(seed)
    centres = planted_modes(C, K, dims, separation, class_sep, rng)
    per_class = n // C
    labels = np.repeat(np.arange(C), per_class)
    modes = np.tile(np.repeat(np.arange(K), mode_counts(per_class, K)), C)
    u = centres[labels, modes] + rng.child("noise").standard_normal((n, dims))
    basis = _blob_basis(dims, side, blob_width)
    logits = bias + gain * np.tensordot(u, basis, axes=(1, 0))
    images = 1.0 / (1.0 + np.exp(-logits))
    order = rng.child("order").permutation(n)
    return Dataset(images=images[order, None], labels=labels[order], source=f"synthetic:C{C}K{K}s{separation:g}",
                   subdomains=modes[order])
