"""Command-line pipeline: synth -> embed -> split -> shiftdist / tsne -> runcv -> report.

Every stage reads and writes files in one run directory (``--out``) and
appends a section to ``manifest.txt``.
"""
from __future__ import annotations

import argparse
import datetime
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from ..embed2d import TsneConfig, run_tsne, write_tsne_csv
from ..numkit import SeededRng
from ..resampler import (
    cluster_classes,
    embed_classes,
    merge,
    random_split_baseline,
    read_folds_csv,
    write_folds_csv,
)
from ..transport import mean_off_diagonal, pairwise_fold_distances, write_distance_csv
from ..vae import VaeConfig, extract_latents, read_latents_csv, train_vae, write_latents_csv
from .config import DEFAULTS, format_config, load_config
from .data import Dataset, dataset_hash, gen_synthetic, load_idx, load_idx_combined, write_dataset_idx
from .experiment import TrainConfig, run_cv_experiment
from .report import render_report
from .zoo import NON_FAITHFUL, parse_model_name

log = logging.getLogger("shiftfold")

SPLITTERS = ("vgmm", "random")


class Run:
    def __init__(self, args):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = args.seed
        self.threads = max(1, args.threads)
        overrides = {k: v for k, v in vars(args).items() if k in DEFAULTS and v is not None}
        self.config = load_config(args.config, overrides)
        self.rng = SeededRng(self.seed)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def manifest(self, stage: str, entries: dict) -> None:
        lines = [f"[{stage}]", f"timestamp = {datetime.datetime.now(datetime.timezone.utc).isoformat()}",
                 f"seed = {self.seed}", f"threads = {self.threads}"]
        lines += [f"{k} = {v}" for k, v in entries.items()]
        lines += ["config." + line for line in format_config(self.config).splitlines()]
        lines += [f"version.{k} = {v}" for k, v in _versions().items()]
        with open(self.path("manifest.txt"), "a") as fh:
            fh.write("\n".join(lines) + "\n\n")

    @property
    def K(self) -> int:
        return self.config["splitter.K"]

    @property
    def repeat(self) -> int:
        return self.config["splitter.repeat"]

    def vae_config(self, image_shape) -> VaeConfig:
        c = self.config
        return VaeConfig(arch=c["vae.arch"], image_shape=tuple(image_shape), latent_dim=c["vae.latent_dim"],
                         hidden=c["vae.hidden"], epochs=c["vae.epochs"], batch_size=c["vae.batch_size"],
                         lr=c["vae.lr"])

    def train_config(self) -> TrainConfig:
        c = self.config
        return TrainConfig(epochs=c["train.epochs"], batch_size=c["train.batch_size"], lr=c["train.lr"],
                           val_fraction=c["splitter.val_fraction"], test_every_epoch=c["train.test_every_epoch"],
                           mc_train=c["train.mc_train"], mc_eval=c["train.mc_eval"],
                           prior_sigma=c["train.prior_sigma"])

    def dataset(self) -> Dataset:
        c = self.config
        if c["dataset.source"] == "synthetic":
            img, lab = self.path("data", "images.idx"), self.path("data", "labels.idx")
            if not img.exists():
                raise SystemExit(f"{img} missing; run the synth stage first")
            return load_idx(img, lab)
        if c["dataset.source"] == "idx":
            images = [p for p in c["dataset.images"].split(",") if p.strip()]
            labels = [p for p in c["dataset.labels"].split(",") if p.strip()]
            if not images or len(images) != len(labels):
                raise SystemExit("dataset.images and dataset.labels must list the same number of files")
            return load_idx_combined([(i.strip(), l.strip()) for i, l in zip(images, labels)])
        raise SystemExit(f"unknown dataset.source {c['dataset.source']!r}")

    def folds_path(self, splitter: str, r: int = 0) -> Path:
        return self.path(f"folds_r{r}_{splitter}.csv")


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "shiftfold": pkg}


def cmd_synth(run: Run) -> None:
    c = run.config
    if c["dataset.source"] != "synthetic":
        raise SystemExit("synth needs dataset.source = synthetic")
    data = gen_synthetic(C=c["dataset.classes"], K=c["dataset.subdomains"], dims=c["dataset.dims"],
                         separation=c["dataset.separation"], n=c["dataset.n"], seed=run.seed,
                         class_sep=c["dataset.class_sep"])
    write_dataset_idx(run.path("data"), data)
    with open(run.path("data", "subdomains.csv"), "w") as fh:
        fh.write("instance_index,class_label,subdomain\n")
        for i, (y, s) in enumerate(zip(data.labels, data.subdomains)):
            fh.write(f"{i},{y},{s}\n")
    stored = run.dataset()
    run.manifest("synth", {"dataset.hash": dataset_hash(stored), "dataset.size": len(stored)})


def cmd_embed(run: Run) -> None:
    data = run.dataset()
    vc = run.vae_config(data.images.shape[1:])
    rng = run.rng.child("embed")
    members, latents = embed_classes(data.images, data.labels, vc, rng, run.threads)
    for c, (idx, z) in enumerate(zip(members, latents)):
        write_latents_csv(run.path(f"latents_class{c}.csv"), z, index=idx)
    shared = train_vae(data.images, vc, rng.child("all"))
    shared.save(run.path("checkpoints", "vae_all"))
    write_latents_csv(run.path("latents.csv"), extract_latents(shared, data.images), index=np.arange(len(data)))
    run.manifest("embed", {"dataset.hash": dataset_hash(data), "classes": len(members),
                           "vae.final_loss": repr(shared.loss_trace[-1]) if shared.loss_trace else "none"})


def cmd_split(run: Run) -> None:
    data = run.dataset()
    C = data.n_classes
    members, latents = [], []
    for c in range(C):
        z, idx = read_latents_csv(run.path(f"latents_class{c}.csv"))
        members.append(idx)
        latents.append(z)
    opts = {"max_iter": run.config["vgmm.max_iter"], "tol": run.config["vgmm.tol"],
            "max_restarts": run.config["vgmm.restarts"]}
    rng = run.rng.child("split")
    assign = cluster_classes(members, latents, run.K, rng.child("vgmm"), run.threads, vgmm_options=opts)
    entries = {}
    for d in assign.diagnostics:
        entries[f"vgmm.class{d['class']}"] = (f"restarts={d['restarts']} kmeans_fallback={d['kmeans_fallback']} "
                                              f"reduced_dim={d['reduced_dim']}")
    for fa in merge(assign, repeat=run.repeat, rng=rng.child("merge")):
        fa.validate(len(data))
        write_folds_csv(run.folds_path("vgmm", fa.repeat), fa)
    for r in range(run.repeat):
        fa = random_split_baseline(data.labels, run.K, rng.child("random", r))
        fa.repeat = r
        fa.validate(len(data))
        write_folds_csv(run.folds_path("random", r), fa)
    run.manifest("split", entries)


def cmd_shiftdist(run: Run) -> None:
    latents, index = read_latents_csv(run.path("latents.csv"))
    entries = {}
    for splitter in SPLITTERS:
        fa = read_folds_csv(run.folds_path(splitter), K=run.K)
        order = np.argsort(index)
        folds = np.empty(len(index), dtype=np.int64)
        folds[fa.index] = fa.folds
        D = pairwise_fold_distances(latents[order], folds[index[order]], subsample=run.config["report.w_subsample"],
                                    rng=run.rng.child("shiftdist", splitter), threads=run.threads, K=run.K)
        write_distance_csv(run.path(f"distances_{splitter}.csv"), D)
        entries[f"{splitter}.mean_off_diagonal"] = repr(mean_off_diagonal(D))
    run.manifest("shiftdist", entries)


def cmd_tsne(run: Run) -> None:
    latents, index = read_latents_csv(run.path("latents.csv"))
    fa = read_folds_csv(run.folds_path("vgmm"), K=run.K)
    lookup = dict(zip(fa.index.tolist(), zip(fa.labels.tolist(), fa.folds.tolist())))
    c = run.config
    cfg = TsneConfig(perplexity=c["report.perplexity"], n_iter=c["report.tsne_iters"],
                     max_points=c["report.tsne_points"])
    res = run_tsne(latents, cfg, run.rng.child("tsne"))
    rows = [lookup[int(i)] for i in index[res.index]]
    write_tsne_csv(run.path("tsne.csv"), res.Y, [r[0] for r in rows], [r[1] for r in rows])
    run.manifest("tsne", {"points": len(res.index), "perplexity": repr(res.perplexity),
                          "kl.initial": repr(res.kl_trace[0]), "kl.final": repr(res.kl_trace[-1])})


def cmd_runcv(run: Run) -> None:
    data = run.dataset()
    cfg = run.train_config()
    models = [m.strip() for m in run.config["model.names"].split(",") if m.strip()]
    for m in models:
        if parse_model_name(m)[0] in NON_FAITHFUL:
            log.warning("%s is an approximate adaptation to small images", m)
    metrics = run.path("metrics.csv")
    if metrics.exists():
        metrics.unlink()
    entries = {}
    for splitter in SPLITTERS:
        for r in range(run.repeat):
            fa = read_folds_csv(run.folds_path(splitter, r), K=run.K, repeat=r)
            for model in models:
                res = run_cv_experiment(data, fa, splitter, model, cfg, run.rng.child("runcv", splitter, r),
                                        run_id=f"r{r}", threads=run.threads, metrics_path=metrics,
                                        checkpoint_dir=run.path("checkpoints", f"r{r}"))
                for fold, reason in res.aborted.items():
                    entries[f"aborted.{splitter}.r{r}.{model}.fold{fold}"] = reason
    entries["train.optimizer"] = "adam"
    run.manifest("runcv", entries)


def cmd_report(run: Run) -> None:
    distances = {s: run.path(f"distances_{s}.csv") for s in SPLITTERS if run.path(f"distances_{s}.csv").exists()}
    tsne = run.path("tsne.csv") if run.path("tsne.csv").exists() else None
    summary = render_report(run.path("metrics.csv"), run.out, tsne, distances)
    sys.stdout.write(summary.text)
    run.manifest("report", {"panels": summary.panels})


COMMANDS = {
    "synth": (cmd_synth, "generate the planted-subdomain synthetic dataset"),
    "embed": (cmd_embed, "train per-class and shared VAEs, write latent CSVs"),
    "split": (cmd_split, "write VGMM and random fold CSVs"),
    "shiftdist": (cmd_shiftdist, "pairwise Wasserstein distances between folds"),
    "tsne": (cmd_tsne, "2-D t-SNE coordinates of the shared latents"),
    "runcv": (cmd_runcv, "cross-validation experiment for every splitter and model"),
    "report": (cmd_report, "accuracy SVG, t-SNE SVG and summary text"),
}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps sub-command defaults from hiding flags given before the sub-command
    S = argparse.SUPPRESS
    common.add_argument("--config", default=S, help="flat key = value configuration file")
    common.add_argument("--seed", type=int, default=S, help="root seed (default 0)")
    common.add_argument("--out", default=S, help="run directory (default ./run)")
    common.add_argument("--threads", type=int, default=S, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=S)
    group = common.add_argument_group("configuration overrides")
    for key, value in DEFAULTS.items():
        group.add_argument(f"--{key}", dest=key, default=S, metavar=type(value).__name__.upper())
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="shiftfold", parents=[common],
                                     description="Shift-inducing cross-validation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for key, default in (("config", None), ("seed", 0), ("out", "run"), ("threads", 1), ("verbose", False)):
        if not hasattr(args, key):
            setattr(args, key, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
    except ValueError as err:
        raise SystemExit(f"configuration error: {err}") from None
    COMMANDS[args.command][0](run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
