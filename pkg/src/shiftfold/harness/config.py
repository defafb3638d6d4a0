"""Flat ``key = value`` run configuration with dotted keys.

Lines starting with ``#`` are comments.  Every key has a typed default
below and can be overridden on the command line as ``--<key> <value>``.
"""
from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, object] = {
    # dataset.source: "synthetic" or "idx"; idx pairs are comma-separated and concatenated
    "dataset.source": "synthetic",
    "dataset.images": "",
    "dataset.labels": "",
    "dataset.classes": 3,
    "dataset.subdomains": 3,
    "dataset.dims": 8,
    "dataset.separation": 8.0,
    "dataset.class_sep": 4.0,
    "dataset.n": 3000,
    "splitter.K": 5,
    "splitter.repeat": 1,
    "splitter.val_fraction": 0.2,
    "vae.arch": "dense",
    "vae.latent_dim": 62,
    "vae.hidden": 256,
    "vae.epochs": 50,
    "vae.batch_size": 64,
    "vae.lr": 1e-3,
    "vgmm.max_iter": 500,
    "vgmm.tol": 1e-6,
    "vgmm.restarts": 5,
    # comma-separated, each "<arch>" or "<arch>:<frequentist|bayes>"
    "model.names": "mlp-small:frequentist",
    "train.epochs": 100,
    "train.batch_size": 64,
    "train.lr": 1e-3,
    "train.test_every_epoch": True,
    "train.mc_train": 1,
    "train.mc_eval": 10,
    "train.prior_sigma": 0.1,
    "report.tsne_points": 1000,
    "report.perplexity": 30.0,
    "report.tsne_iters": 1000,
    "report.w_subsample": 500,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ValueError(f"{source}:{line_no}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as err:
            raise ValueError(f"{source}:{line_no}: {err}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then ``overrides`` (raw strings or typed values)."""
    config = dict(DEFAULTS)
    if path is not None:
        config.update(parse_config_text(Path(path).read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ValueError(f"unknown key {key!r}")
        config[key] = _coerce(key, value) if isinstance(value, str) else value
    return config


def format_config(config: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(config.items()))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
