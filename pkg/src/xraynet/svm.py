"""Linear one-vs-rest SVM on fixed feature vectors.

The binary problem is the soft-margin primal

    minimize  1/2 ||w||^2 + C * sum_i max(0, 1 - y_i (w.x_i + b))

solved by mini-batch subgradient descent on the equivalent normalized
objective ``lam/2 ||w||^2 + mean hinge`` with ``lam = 1 / (M C)`` and step
``eta0 / (1 + lam t)``. Subgradient steps are not monotone, so each epoch
evaluates the full objective at the current and the running-average iterate
and keeps the best point seen; the logged objective is that best value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .data import FeatureSet


class SvmError(ValueError):
    pass


def default_grid() -> list[float]:
    return [2.0 ** e for e in range(-10, 11, 2)]


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    grid: tuple[float, ...] = field(default_factory=lambda: tuple(default_grid()))
    folds: int = 5
    max_epochs: int = 200
    tolerance: float = 1e-4
    patience: int = 5
    batch_size: int = 16
    eta0: float = 1.0
    seed: int = 0
    l2_normalize: bool = False

    def __post_init__(self):
        if self.C <= 0:
            raise SvmError("C must be positive")
        if not self.grid:
            raise SvmError("grid must be non-empty")
        if any(c <= 0 for c in self.grid) or any(a >= b for a, b in zip(self.grid, self.grid[1:])):
            raise SvmError("grid must be positive and strictly increasing")
        if self.folds < 2:
            raise SvmError("folds must be >= 2")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise SvmError("max_epochs, batch_size and patience must be >= 1")


@dataclass
class BinaryResult:
    w: np.ndarray
    b: float
    objective: float
    history: list[float]
    epochs: int


@dataclass
class MulticlassSvm:
    W: np.ndarray  # [K, D]
    b: np.ndarray  # [K]
    trained_C: float
    classes: list[str] = field(default_factory=list)
    l2_normalize: bool = False
    objectives: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] < 2:
            raise SvmError(f"need a [K>=2, D] weight matrix, got {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise SvmError("bias length must equal the number of classes")
        if not self.classes:
            self.classes = [str(i) for i in range(self.W.shape[0])]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]


def _normalize(X: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(n > 0, n, 1.0)


def _objective(X, Y, W, b, C):
    """Primal objective per column. X [M,D], Y [M,K] in {-1,+1}, W [K,D]."""
    margins = Y * (X @ W.T + b)
    return 0.5 * np.einsum("kd,kd->k", W, W) + C * np.maximum(0.0, 1.0 - margins).sum(axis=0)


def _solve(X: np.ndarray, Y: np.ndarray, C: float, cfg: SvmConfig):
    m, d = X.shape
    k = Y.shape[1]
    lam = 1.0 / (m * C)
    W = np.zeros((k, d))
    b = np.zeros(k)
    W_avg, b_avg = W.copy(), b.copy()
    best_W, best_b = W.copy(), b.copy()
    best = _objective(X, Y, W, b, C)
    history = [best.copy()]
    active = np.ones(k, dtype=bool)
    stall = np.zeros(k, dtype=int)
    rng = np.random.default_rng(cfg.seed)
    t = 0
    n_avg = 0
    epochs = 0
    for epoch in range(cfg.max_epochs):
        epochs = epoch + 1
        order = rng.permutation(m)
        cols = np.flatnonzero(active)
        for s in range(0, m, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = X[idx], Y[idx][:, cols]
            viol = (yb * (xb @ W[cols].T + b[cols]) < 1.0) * yb
            eta = cfg.eta0 / (1.0 + lam * t)
            W[cols] -= eta * (lam * W[cols] - viol.T @ xb / len(idx))
            b[cols] += eta * viol.sum(axis=0) / len(idx)
            t += 1
            n_avg += 1
            W_avg[cols] += (W[cols] - W_avg[cols]) / n_avg
            b_avg[cols] += (b[cols] - b_avg[cols]) / n_avg
        prev = best.copy()
        for cand_W, cand_b in ((W, b), (W_avg, b_avg)):
            obj = _objective(X, Y, cand_W, cand_b, C)
            better = active & (obj < best)
            best[better] = obj[better]
            best_W[better] = cand_W[better]
            best_b[better] = cand_b[better]
        history.append(best.copy())
        rel = (prev - best) / np.maximum(np.abs(prev), 1e-12)
        stall = np.where(active & (rel < cfg.tolerance), stall + 1, 0)
        active &= stall < cfg.patience
        if not active.any():
            break
    return best_W, best_b, best, np.array(history), epochs


def train_binary(X: np.ndarray, y: np.ndarray, C: float, cfg: SvmConfig | None = None) -> BinaryResult:
    """Soft-margin linear SVM for labels in {-1, +1}."""
    cfg = cfg or SvmConfig(C=C)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise SvmError(f"X {X.shape} and y {y.shape} disagree")
    if len(y) < 2:
        raise SvmError("need at least 2 samples")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise SvmError("binary labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise SvmError("both labels must be present")
    W, b, obj, hist, epochs = _solve(X, y[:, None], C, cfg)
    return BinaryResult(W[0], float(b[0]), float(obj[0]), hist[:, 0].tolist(), epochs)


def train_ovr(features: FeatureSet, C: float, cfg: SvmConfig | None = None,
              num_classes: int | None = None, classes=None) -> MulticlassSvm:
    """One binary problem per class (class k vs the rest)."""
    cfg = cfg or SvmConfig(C=C)
    X = np.asarray(features.vectors, dtype=np.float64)
    if cfg.l2_normalize:
        X = _normalize(X)
    ids = features.class_ids
    k = num_classes if num_classes is not None else int(ids.max()) + 1
    if k < 2:
        raise SvmError("need at least 2 classes")
    missing = sorted(set(range(k)) - set(ids.tolist()))
    if missing:
        raise SvmError(f"classes {missing} have no training samples")
    Y = np.where(ids[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    W, b, obj, _, _ = _solve(X, Y, C, cfg)
    return MulticlassSvm(W, b, C, list(classes) if classes else [], cfg.l2_normalize, obj.tolist())


def decision_function(svm: MulticlassSvm, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != svm.dim:
        raise SvmError(f"feature dimension {X.shape[1]} does not match model dimension {svm.dim}")
    if svm.l2_normalize:
        X = _normalize(X)
    return X @ svm.W.T + svm.b


def predict(svm: MulticlassSvm, x: np.ndarray):
    """Argmax of class scores, lowest index on ties. A 1-D input returns an int."""
    scores = decision_function(svm, x)
    pred = scores.argmax(axis=1)
    return int(pred[0]) if np.ndim(x) == 1 else pred


def accuracy(svm: MulticlassSvm, features: FeatureSet) -> float:
    return float(np.mean(predict(svm, features.vectors) == features.class_ids))


def stratified_folds(class_ids: np.ndarray, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample; each class is dealt round-robin after a seeded shuffle."""
    class_ids = np.asarray(class_ids)
    out = np.empty(len(class_ids), dtype=np.int64)
    for c in np.unique(class_ids):
        idx = np.flatnonzero(class_ids == c)
        if len(idx) < folds:
            raise SvmError(f"class {c} has {len(idx)} samples, fewer than {folds} folds")
        perm = np.random.default_rng([seed, int(c)]).permutation(idx)
        out[perm] = np.arange(len(idx)) % folds
    return out


def grid_search_cv(features: FeatureSet, grid=None, folds: int = 5, seed: int = 0,
                   cfg: SvmConfig | None = None) -> tuple[float, list[tuple[float, int, float]]]:
    """Exhaustive search over ``grid`` by stratified k-fold accuracy.

    Returns the best C (smallest on ties) and rows of ``(C, fold, accuracy)``.
    """
    cfg = cfg or SvmConfig()
    grid = list(cfg.grid if grid is None else grid)
    if not grid:
        raise SvmError("grid must be non-empty")
    fold_of = stratified_folds(features.class_ids, folds, seed)
    k = int(features.class_ids.max()) + 1
    table = []
    best_C, best_acc = None, -1.0
    for C in grid:
        accs = []
        for f in range(folds):
            tr, va = fold_of != f, fold_of == f
            model = train_ovr(features.take(tr), C, cfg, num_classes=k)
            acc = accuracy(model, features.take(va))
            table.append((C, f, acc))
            accs.append(acc)
        mean = float(np.mean(accs))
        if mean > best_acc:
            best_C, best_acc = C, mean
    return best_C, table


def write_cv_table(path, table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "fold", "accuracy"])
        for C, f, acc in table:
            w.writerow([repr(C), f, repr(acc)])


def save_svm(svm: MulticlassSvm, path) -> None:
    meta = {"kind": "svm", "C": svm.trained_C, "classes": svm.classes, "l2_normalize": svm.l2_normalize}
    write_container(path, {"W": svm.W, "b": svm.b}, meta)


def load_svm(path) -> MulticlassSvm:
    tensors, meta = read_container(path)
    if meta.get("kind") != "svm":
        raise SvmError(f"{path}: not an SVM model (kind={meta.get('kind')!r})")
    return MulticlassSvm(tensors["W"], tensors["b"], float(meta["C"]), list(meta["classes"]),
                         bool(meta["l2_normalize"]))
