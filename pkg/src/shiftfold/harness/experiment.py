"""Cross-validation loop: fresh classifier per fold, per-epoch train/val/test metrics."""
from __future__ import annotations

import csv
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autonet import Adam, NonFiniteGradientError, save_checkpoint, softmax, softmax_xent
from ..bayeslayer import PriorSpec, free_energy, predictive_mc
from ..numkit import NonFiniteError, SeededRng
from ..resampler import FoldAssignment, make_train_val_test
from .data import Dataset
from .zoo import build_classifier, parse_model_name

log = logging.getLogger(__name__)

METRICS_HEADER = ["run_id", "splitter", "model", "fold", "epoch", "split", "accuracy", "loss"]
SPLITS = ("train", "val", "test")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    val_fraction: float = 0.2
    test_every_epoch: bool = True
    mc_train: int = 1  # stochastic passes per Bayesian training step
    mc_eval: int = 10  # predictive samples for Bayesian evaluation
    prior_sigma: float = 0.1
    eval_batch: int = 1024
    log_batches: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch size and learning rate must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    splitter: str
    model: str
    fold: int
    epoch: int
    split: str
    accuracy: float
    loss: float

    def row(self):
        return [self.run_id, self.splitter, self.model, self.fold, self.epoch, self.split,
                repr(float(self.accuracy)), repr(float(self.loss))]


@dataclass
class FoldOutcome:
    fold: int
    records: list
    aborted: str | None = None
    batch_log: list = field(default_factory=list)  # training-instance ids per batch (debug only)


@dataclass
class ExperimentResult:
    records: list
    aborted: dict  # fold -> reason
    batch_logs: dict  # fold -> list of id arrays


class MetricsAppender:
    """Single serialized writer; the header is written only to a new or empty file."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def append(self, records) -> None:
        with self._lock, open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for r in records:
                writer.writerow(r.row())
            fh.flush()


def write_metrics(path, records) -> None:
    path = Path(path)
    if path.exists():
        path.unlink()
    MetricsAppender(path).append(records)


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        out = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(METRICS_HEADER):
                raise ValueError(f"{path}:{line}: expected {len(METRICS_HEADER)} fields")
            try:
                out.append(MetricsRecord(row[0], row[1], row[2], int(row[3]), int(row[4]), row[5],
                                         float(row[6]), float(row[7])))
            except ValueError as err:
                raise ValueError(f"{path}:{line}: {err}") from None
    return out


def evaluate(net, x, y, bayes: bool, rng: SeededRng, config: TrainConfig) -> tuple[float, float]:
    """(accuracy, mean NLL); Bayesian nets use the Monte Carlo predictive mean."""
    if len(x) == 0:
        return math.nan, math.nan
    if bayes:
        probs = predictive_mc(net, x, rng, config.mc_eval, config.eval_batch)
    else:
        probs = np.concatenate([softmax(net(x[s:s + config.eval_batch]))
                                for s in range(0, len(x), config.eval_batch)])
    nll = -np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300)))
    return float(np.mean(probs.argmax(axis=1) == y)), float(nll)


def _train_step(net, opt, xb, yb, bayes, noise_rng, kl_weight, prior, config):
    if bayes:
        loss, grads = free_energy(net, xb, yb, noise_rng, samples=config.mc_train, kl_weight=kl_weight,
                                  prior=prior)
        value = loss.total
    else:
        logits, caches = net.forward(xb, train=True)
        value, g = softmax_xent(logits, yb)
        if not math.isfinite(value):
            raise NonFiniteError("cross-entropy is not finite")
        _, grads = net.backward(caches, g)
    opt.step(grads)
    return value


def run_fold(dataset: Dataset, fa: FoldAssignment, k: int, model: str, config: TrainConfig, rng: SeededRng,
             run_id: str = "run", splitter: str = "vgmm", on_epoch=None, checkpoint_dir=None) -> FoldOutcome:
    """Train a fresh model with fold ``k`` held out; ``on_epoch`` receives each epoch's records."""
    _, family = parse_model_name(model)
    bayes = family == "bayes"
    train, val, test = make_train_val_test(fa, k, config.val_fraction, rng.child("split", k))
    x, y = dataset.images, dataset.labels
    mrng = rng.child("model", model, "fold", k)
    net = build_classifier(model, dataset.n_classes, mrng.child("init"), dataset.images.shape[1:])
    opt = Adam(net.params(), lr=config.lr)
    prior = PriorSpec(config.prior_sigma)
    kl_weight = 1.0 / len(train)
    shuffle_rng, noise_rng, eval_rng = mrng.child("shuffle"), mrng.child("noise"), mrng.child("eval")
    outcome = FoldOutcome(fold=k, records=[])
    parts = {"train": train, "val": val, "test": test}
    for epoch in range(1, config.epochs + 1):
        order = train[shuffle_rng.permutation(len(train))]
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                if config.log_batches:
                    outcome.batch_log.append(idx.copy())
                _train_step(net, opt, x[idx], y[idx], bayes, noise_rng, kl_weight, prior, config)
        except (NonFiniteError, NonFiniteGradientError) as err:
            outcome.aborted = f"epoch {epoch}: {err}"
            log.error("%s/%s fold %d aborted: %s", splitter, model, k, outcome.aborted)
            break
        splits = SPLITS if config.test_every_epoch or epoch == config.epochs else SPLITS[:2]
        epoch_records = []
        for split in splits:
            acc, loss = evaluate(net, x[parts[split]], y[parts[split]], bayes, eval_rng.child(epoch, split), config)
            epoch_records.append(MetricsRecord(run_id, splitter, model, k, epoch, split, acc, loss))
        outcome.records.extend(epoch_records)
        if on_epoch is not None:
            on_epoch(epoch_records)
    if checkpoint_dir is not None:
        tag = f"{splitter}_{model.replace(':', '-')}_fold{k}"
        save_checkpoint(Path(checkpoint_dir) / tag, net.state_dict())
    return outcome


def run_cv_experiment(dataset: Dataset, fa: FoldAssignment, splitter: str, model: str, config: TrainConfig,
                      rng: SeededRng, run_id: str = "run", threads: int = 1, metrics_path=None,
                      checkpoint_dir=None) -> ExperimentResult:
    """Rotate the test role over all folds.

    With ``threads > 1`` folds train concurrently and their rows are written
    in fold order once each finishes, so the metrics file does not depend on
    scheduling.  Sequentially, rows are appended after every epoch.
    """
    parse_model_name(model)
    fa.validate(len(dataset))
    appender = MetricsAppender(metrics_path) if metrics_path is not None else None
    folds = list(range(fa.K))

    def job(k, stream):
        return run_fold(dataset, fa, k, model, config, rng, run_id, splitter,
                        on_epoch=appender.append if stream and appender else None, checkpoint_dir=checkpoint_dir)

    if threads > 1 and len(folds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(job, k, False) for k in folds]
            outcomes = []
            for fut in futures:
                outcomes.append(fut.result())
                if appender:
                    appender.append(outcomes[-1].records)
    else:
        outcomes = [job(k, True) for k in folds]
    return ExperimentResult(
        records=[r for o in outcomes for r in o.records],
        aborted={o.fold: o.aborted for o in outcomes if o.aborted},
        batch_logs={o.fold: o.batch_log for o in outcomes},
    )


def final_epoch_summary(records) -> dict:
    """(splitter, model, split) -> (mean, std, n_folds) of accuracy at each fold's last epoch."""
    last = {}
    for r in records:
        key = (r.splitter, r.model, r.fold)
        last[key] = max(last.get(key, 0), r.epoch)
    groups: dict = {}
    for r in records:
        if r.epoch == last[(r.splitter, r.model, r.fold)]:
            groups.setdefault((r.splitter, r.model, r.split), []).append(r.accuracy)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}
