"""Mini-batch SGD training of the CNN with on-the-fly augmentation."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import nn
from .augment import AugmentConfig, augment_image, eval_view
from .data import DatasetManifest, load_split

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "lr", "seconds")


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr0: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    lr_decay: float = 0.1
    decay_at: tuple[float, ...] = (0.5, 0.75)
    weight_decay: float = 1e-4
    seed: int = 0
    threads: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def lr_at(self, epoch: int) -> float:
        milestones = [round(f * self.epochs) for f in self.decay_at]
        return self.lr0 * self.lr_decay ** sum(epoch >= m for m in milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    seconds: float
    augment_seed: int = 0


@dataclass
class RunHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def best(self) -> EpochRecord:
        return max(self.epochs, key=lambda e: (e.test_acc, -e.epoch))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.train_acc), repr(e.test_acc), repr(e.lr),
                            f"{e.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "RunHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                                float(r["test_acc"]), float(r["lr"]), float(r["seconds"])) for r in rows])


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
                      weight_decay: float = 0.0, nesterov: bool = False):
    """In-place SGD update; returns ``(params, velocity)``.

    v <- momentum*v - lr*(g + weight_decay*p);  p <- p + v
    With ``nesterov`` the parameter moves by ``momentum*v - lr*(g + wd*p)``
    using the freshly updated ``v``.
    """
    if not (params.keys() == grads.keys() == velocity.keys()):
        raise KeyError("params, grads and velocity must have identical key sets")
    for k, p in params.items():
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * p
        v = velocity[k]
        v *= momentum
        v -= lr * g
        if nesterov:
            p += momentum * v - lr * g
        else:
            p += v
    return params, velocity


def zero_velocity(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def evaluate(model: M.Model, images: np.ndarray, labels: np.ndarray, num_classes: int | None = None,
             batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Infer-mode accuracy and confusion matrix (rows: true class, cols: predicted)."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty split")
    k = num_classes or model.spec.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for s in range(0, len(images), batch_size):
        logits, _ = M.forward(model, images[s:s + batch_size], "infer")
        np.add.at(conf, (labels[s:s + batch_size], logits.argmax(axis=1)), 1)
    return float(np.trace(conf) / conf.sum()), conf


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _make_batch(images, idx, aug: AugmentConfig, epoch_seed: int, target) -> np.ndarray:
    return np.stack([augment_image(images[i], aug, int(np.random.SeedSequence([epoch_seed, int(i)])
                                                        .generate_state(1)[0]), target) for i in idx])


def train_arrays(model: M.Model, x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray,
                 y_test: np.ndarray, cfg: TrainConfig, out_dir=None, on_epoch=None):
    """Train on in-memory images; returns ``(model, history)``.

    ``x_test`` is evaluated after every epoch with deterministic center
    preprocessing. With ``out_dir`` set, ``history.csv``, ``last.ckpt`` and
    ``best.ckpt`` (best test accuracy, earliest on ties) are written there.
    """
    if len(x_train) == 0:
        raise ValueError("training split is empty")
    target = tuple(model.spec.input_shape[1:])
    aug = cfg.augment
    test_views = np.stack([eval_view(im, aug, target) for im in x_test])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    velocity = zero_velocity(model.params)
    history = RunHistory()
    best_acc = -1.0
    n = len(x_train)
    pool = ThreadPoolExecutor(1) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = cfg.lr_at(epoch)
            eseed = _epoch_seed(cfg.seed, epoch)
            order = np.random.default_rng(eseed).permutation(n)
            batches = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
            loss_sum, correct = 0.0, 0
            pending = pool.submit(_make_batch, x_train, batches[0], aug, eseed, target) if pool else None
            for b, idx in enumerate(batches):
                if pool:
                    xb = pending.result()
                    if b + 1 < len(batches):
                        pending = pool.submit(_make_batch, x_train, batches[b + 1], aug, eseed, target)
                else:
                    xb = _make_batch(x_train, idx, aug, eseed, target)
                logits, caches = M.forward(model, xb, "train")
                loss, grad = nn.softmax_cross_entropy(logits.astype(np.float64), y_train[idx])
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:g}")
                grads = M.backward(model, grad.astype(model.dtype), caches)
                sgd_momentum_step(model.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay,
                                  cfg.nesterov)
                loss_sum += loss * len(idx)
                correct += int((logits.argmax(axis=1) == y_train[idx]).sum())
            test_acc, _ = evaluate(model, test_views, y_test)
            rec = EpochRecord(epoch, loss_sum / n, correct / n, test_acc, lr, time.perf_counter() - t0, eseed)
            history.epochs.append(rec)
            log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f lr %g (%.1fs)",
                     epoch, rec.train_loss, rec.train_acc, rec.test_acc, lr, rec.seconds)
            if out is not None:
                M.save_checkpoint(model, out / "last.ckpt")
                if test_acc > best_acc:
                    M.save_checkpoint(model, out / "best.ckpt")
                history.write_csv(out / "history.csv")
                _write_seeds(out / "augment_seeds.csv", history)
            best_acc = max(best_acc, test_acc)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if pool:
            pool.shutdown()
    return model, history


def _write_seeds(path, history: RunHistory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "augment_seed"])
        for e in history.epochs:
            w.writerow([e.epoch, e.augment_seed])


def train(model: M.Model, manifest: DatasetManifest, cfg: TrainConfig, out_dir=None, on_epoch=None):
    """Load the manifest's splits and run :func:`train_arrays`."""
    target = tuple(model.spec.input_shape[1:])
    if manifest.num_classes != model.spec.num_classes:
        raise ValueError(f"manifest has {manifest.num_classes} classes, model outputs {model.spec.num_classes}")
    x_tr, y_tr = load_split(manifest, "train", target)
    x_te, y_te = load_split(manifest, "test", target)
    if len(x_te) == 0:
        raise ValueError("manifest has no test records")
    return train_arrays(model, x_tr, y_tr, x_te, y_te, cfg, out_dir, on_epoch)


def write_confusion(path, confusion: np.ndarray, classes=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        labels = list(classes) if classes else [str(i) for i in range(len(confusion))]
        w.writerow(["true\\pred"] + labels)
        for name, row in zip(labels, confusion):
            w.writerow([name] + [int(v) for v in row])
