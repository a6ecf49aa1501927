"""One-vs-all linear SVM patch classifier with score-level ensemble fusion."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codebook import StrokeCodebook, codebook_bytes, parse_codebook

ENSEMBLE_MAGIC = b"SKEN"
EPOCHS = 50
BATCH = 32


@dataclass(frozen=True)
class LinearSvmModel:
    weights: np.ndarray  # (k, dim)
    biases: np.ndarray  # (k,)
    training_seed: int | None = None

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def decision(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.biases


@dataclass(frozen=True)
class SvmEnsemble:
    models: tuple

    def __post_init__(self):
        if not self.models:
            raise ValueError("an ensemble needs at least one model")
        shapes = {m.weights.shape for m in self.models}
        if len(shapes) != 1:
            raise ValueError(f"models disagree on shape: {sorted(shapes)}")

    @property
    def r(self) -> int:
        return len(self.models)

    @property
    def k(self) -> int:
        return self.models[0].k

    @property
    def dim(self) -> int:
        return self.models[0].weights.shape[1]


@dataclass(frozen=True)
class PrecisionReport:
    confusion: np.ndarray  # [true, predicted]
    precision: np.ndarray
    weights: np.ndarray

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0


def hinge_objective(w_aug: np.ndarray, x_aug: np.ndarray, signs: np.ndarray, lam: float) -> float:
    """Mean over classes of ``lam/2 |w|^2 + mean hinge loss``."""
    margins = signs * (x_aug @ w_aug.T)
    hinge = np.maximum(0.0, 1.0 - margins).mean(axis=0)
    reg = 0.5 * lam * np.sum(w_aug * w_aug, axis=1)
    return float(np.mean(reg + hinge))


def train_single_svm(x, y, k: int | None = None, reg_cost: float = 149.0, seed: int = 0,
                     epochs: int = EPOCHS, batch_size: int = BATCH, history: list | None = None) -> LinearSvmModel:
    """Train ``k`` one-vs-all hinge-loss classifiers jointly.

    Mini-batch Pegasos: per epoch a seeded shuffle, step ``1 / (lam * t)`` with
    ``lam = 1 / (reg_cost * n)``, followed by projection onto the ball of
    radius ``1 / sqrt(lam)``. The bias is an appended constant feature. The
    returned weights average the iterates of the second half of the epochs.
    When ``history`` is given, the objective of the current iterate after
    each epoch is appended.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, dim) with one label per row")
    if k is None:
        k = int(y.max()) + 1
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two classes")
    n, dim = x.shape
    lam = 1.0 / (reg_cost * n)
    radius = 1.0 / np.sqrt(lam)
    x_aug = np.hstack([x, np.ones((n, 1))])
    signs = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    w = np.zeros((k, dim + 1))
    rng = np.random.default_rng(seed)
    t = 0
    avg = np.zeros_like(w)
    n_avg = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            batch = order[lo:lo + batch_size]
            t += 1
            xb, sb = x_aug[batch], signs[batch]
            active = (sb * (xb @ w.T)) < 1.0
            grad = (active * sb).T @ xb
            w *= 1.0 - 1.0 / t
            w += grad / (lam * t * len(batch))
            norms = np.linalg.norm(w, axis=1)
            over = norms > radius
            w[over] *= (radius / norms[over])[:, None]
            if 2 * epoch >= epochs:
                avg += w
                n_avg += 1
        if history is not None:
            history.append(hinge_objective(w, x_aug, signs, lam))
    if n_avg:
        w = avg / n_avg
    return LinearSvmModel(w[:, :dim].copy(), w[:, dim].copy(), seed)


def _draw(pool: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    replace = len(pool) < m
    return pool[rng.choice(len(pool), size=m, replace=replace)]


def train_ensemble(pools, m1: int = 100, r: int = 20, reg_cost: float = 149.0, seed: int = 0,
                   epochs: int = EPOCHS) -> SvmEnsemble:
    """Train ``r`` models, each on a fresh draw of ``m1`` descriptors per cluster.

    ``pools[j]`` holds the descriptors of cluster ``j``; a pool smaller than
    ``m1`` is drawn with replacement. Model ``i`` uses seed ``seed + i``.
    """
    pools = [np.asarray(p, dtype=np.float64) for p in pools]
    for j, p in enumerate(pools):
        if len(p) == 0:
            raise ValueError(f"cluster {j} has no descriptors")
    k = len(pools)
    labels = np.repeat(np.arange(k), m1)
    models = []
    for i in range(r):
        model_seed = seed + i
        rng = np.random.default_rng(model_seed)
        x = np.concatenate([_draw(p, m1, rng) for p in pools])
        models.append(train_single_svm(x, labels, k, reg_cost, model_seed, epochs))
    return SvmEnsemble(tuple(models))


def fused_scores(ensemble: SvmEnsemble, x) -> np.ndarray:
    """Sum of raw decision scores across models, shape ``(n, k)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != ensemble.dim:
        raise ValueError(f"descriptor dimension {x.shape[1]} != {ensemble.dim}")
    total = np.zeros((len(x), ensemble.k))
    for model in ensemble.models:
        total += model.decision(x)
    return total


def predict_batch(ensemble: SvmEnsemble, x) -> np.ndarray:
    # argmax returns the lowest index among ties
    return fused_scores(ensemble, x).argmax(axis=1)


def predict(ensemble: SvmEnsemble, d):
    scores = fused_scores(ensemble, d)[0]
    return int(scores.argmax()), scores


def precision_report(confusion) -> PrecisionReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    predicted = confusion.sum(axis=0)
    hits = np.diag(confusion).astype(np.float64)
    precision = np.divide(hits, predicted, out=np.zeros_like(hits), where=predicted > 0)
    best = precision.max() if len(precision) else 0.0
    weights = precision / best if best > 0 else np.zeros_like(precision)
    return PrecisionReport(confusion, precision, weights)


def evaluate_precision(ensemble: SvmEnsemble, x, y) -> PrecisionReport:
    """Confusion matrix and max-normalized per-class precision on held-out data."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("held-out set is empty")
    pred = predict_batch(ensemble, x)
    k = ensemble.k
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return precision_report(confusion)


# -- container -------------------------------------------------------------

_SECTION = struct.Struct("<4sI")


def ensemble_bytes(ensemble: SvmEnsemble) -> bytes:
    parts = [_SECTION.pack(ENSEMBLE_MAGIC, ensemble.r)]
    for m in ensemble.models:
        parts.append(np.asarray(m.weights, dtype="<f4").tobytes())
        parts.append(np.asarray(m.biases, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_ensemble(data: bytes, k: int, dim: int, offset: int = 0):
    magic, r = _SECTION.unpack_from(data, offset)
    if magic != ENSEMBLE_MAGIC:
        raise ValueError(f"no ensemble section at offset {offset}")
    offset += _SECTION.size
    models = []
    for _ in range(r):
        w = np.frombuffer(data, "<f4", k * dim, offset).reshape(k, dim).astype(np.float64)
        offset += 4 * k * dim
        b = np.frombuffer(data, "<f4", k, offset).astype(np.float64)
        offset += 4 * k
        models.append(LinearSvmModel(w, b))
    return SvmEnsemble(tuple(models)), offset


def save_model(path, codebook: StrokeCodebook, ensemble: SvmEnsemble) -> None:
    """Write the codebook container followed by the ``SKEN`` ensemble section."""
    if codebook.k != ensemble.k:
        raise ValueError("codebook and ensemble disagree on k")
    with open(path, "wb") as fh:
        fh.write(codebook_bytes(codebook))
        fh.write(ensemble_bytes(ensemble))


def load_model(path):
    """Read ``(codebook, ensemble)`` from a model file."""
    with open(path, "rb") as fh:
        data = fh.read()
    codebook, offset = parse_codebook(data)
    ensemble, _ = parse_ensemble(data, codebook.k, codebook.hog.dim(codebook.patch_size), offset)
    return codebook, ensemble
