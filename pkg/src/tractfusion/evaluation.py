"""Weighted F1, stratified k-fold splits and the configuration-matrix runner."""

from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import KINDS
from .dataset import Features
from .errors import DataError, TractFusionError
from .fusion import FusionConfig, TrainConfig, predict_class, pretrain, train_stage2
from .streamlines import N_CLASSES

log = logging.getLogger(__name__)

# (variant, strategy) rows of the matrix, baseline first
MATRIX_ROWS = (
    ("none", "logits_add"),
    ("endpoint_only", "logits_add"),
    ("fmri_only", "logits_add"),
    ("full", "concat"),
    ("full", "logits_add"),
)


# --- seeds ---------------------------------------------------------------


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named purpose, derived from one global seed."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))


# --- metrics -------------------------------------------------------------


def confusion_matrix(truth, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise DataError(f"truth/prediction length mismatch: {truth.shape} vs {pred.shape}")
    if truth.size and (min(truth.min(), pred.min()) < 0
                       or max(truth.max(), pred.max()) >= n_classes):
        raise DataError(f"labels outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def per_class_scores(confusion) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class; 0 wherever a denominator vanishes."""
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def weighted_f1(confusion) -> float:
    """Support-weighted mean of per-class F1."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DataError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise DataError("confusion matrix has negative entries")
    total = cm.sum()
    if total == 0:
        return 0.0
    _, _, f1 = per_class_scores(cm)
    return float(np.dot(cm.sum(axis=1) / total, f1))


@dataclass
class FoldReport:
    fold: int
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1_per_class: np.ndarray
    f1: float
    n: int

    @classmethod
    def from_predictions(cls, fold: int, truth, pred) -> "FoldReport":
        cm = confusion_matrix(truth, pred)
        p, r, f = per_class_scores(cm)
        return cls(fold, cm, p, r, f, weighted_f1(cm), int(cm.sum()))

    def to_json(self) -> dict:
        return {"fold": self.fold, "f1": self.f1, "n": self.n,
                "confusion": self.confusion.tolist(),
                "precision": self.precision.tolist(), "recall": self.recall.tolist(),
                "f1_per_class": self.f1_per_class.tolist()}


@dataclass
class RunReport:
    backbone: str
    variant: str
    strategy: str
    folds: list[FoldReport] = field(default_factory=list)

    @property
    def scores(self) -> np.ndarray:
        return np.array([f.f1 for f in self.folds])

    @property
    def mean_f1(self) -> float:
        return float(self.scores.mean()) if self.folds else math.nan

    @property
    def std_f1(self) -> float:
        """Population standard deviation over folds."""
        return float(self.scores.std()) if self.folds else math.nan

    def to_json(self) -> dict:
        return {"backbone": self.backbone, "variant": self.variant, "strategy": self.strategy,
                "folds": [f.to_json() for f in self.folds],
                "mean_f1": self.mean_f1, "std_f1": self.std_f1}


# --- folds ---------------------------------------------------------------


def kfold_split(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Stratified folds: each class is shuffled and dealt round-robin.

    The starting fold rotates from class to class so that fold sizes stay
    within one of each other overall as well as per class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if labels.size < k:
        raise DataError(f"{labels.size} samples cannot fill {k} folds")
    rng = substream(seed, "kfold")
    members: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for j, i in enumerate(idx):
            members[(offset + j) % k].append(int(i))
        offset = (offset + idx.size) % k
    return [np.sort(np.array(m, dtype=np.int64)) for m in members]


def train_indices(folds: list[np.ndarray], held_out: int) -> np.ndarray:
    return np.sort(np.concatenate([f for j, f in enumerate(folds) if j != held_out]))


# --- matrix --------------------------------------------------------------


@dataclass
class MatrixSpec:
    backbones: tuple[str, ...] = KINDS
    rows: tuple[tuple[str, str], ...] = MATRIX_ROWS
    folds: int = 5
    seed: int = 0
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(30, 512, 1e-4))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(20, 512, 1e-4))
    tied: bool = True

    def __post_init__(self):
        for b in self.backbones:
            if b not in KINDS:
                raise DataError(f"unknown backbone kind {b!r}")
        for variant, strategy in self.rows:
            self.fusion_config(self.backbones[0] if self.backbones else KINDS[0], variant,
                               strategy)

    def fusion_config(self, backbone: str, variant: str, strategy: str) -> FusionConfig:
        s = self.stage2
        return FusionConfig(strategy, backbone, variant, s.epochs, s.batch_size, s.lr, self.tied)

    def to_json(self) -> dict:
        return {"backbones": list(self.backbones), "rows": [list(r) for r in self.rows],
                "folds": self.folds, "seed": self.seed, "pretrain": asdict(self.pretrain),
                "stage2": asdict(self.stage2), "tied": self.tied}


def _fold_job(feats: Features, spec: MatrixSpec, backbone: str, fold: int,
              train_idx: np.ndarray, test_idx: np.ndarray) -> list[FoldReport]:
    """Pretrain once on the fold's training split, then every matrix row."""
    tag = (backbone, fold)
    pb = pretrain(feats, train_idx, backbone, spec.pretrain,
                  init_rng=substream(spec.seed, "pretrain-init", *tag),
                  shuffle_rng=substream(spec.seed, "pretrain-shuffle", *tag))
    train_out = pb.encode(feats, train_idx)
    test_out = pb.encode(feats, test_idx)
    truth = feats.labels[test_idx]
    reports = []
    for variant, strategy in spec.rows:
        cfg = spec.fusion_config(backbone, variant, strategy)
        row = (*tag, variant, strategy)
        try:
            model = train_stage2(pb, feats, train_idx, cfg,
                                 init_rng=substream(spec.seed, "stage2-init", *row),
                                 shuffle_rng=substream(spec.seed, "stage2-shuffle", *row),
                                 backbone_out=train_out)
        except TractFusionError as exc:
            raise type(exc)(f"[{backbone}/{variant}/{strategy} fold {fold}] {exc}") from exc
        final, _ = model.predict_logits(feats, test_idx, backbone_out=test_out)
        reports.append(FoldReport.from_predictions(fold, truth, predict_class(final)))
        log.info("%s fold %d %s/%s f1=%.4f", backbone, fold, variant, strategy,
                 reports[-1].f1)
    return reports


def run_matrix(feats: Features, spec: MatrixSpec | None = None, jobs: int = 1) -> list[RunReport]:
    """Cross-validate every (backbone, row) configuration.

    Jobs are (backbone, fold) pairs; results are assembled in a fixed order so
    the report does not depend on ``jobs``.
    """
    spec = spec or MatrixSpec()
    labels = feats.require_labels()
    folds = kfold_split(labels, spec.folds, spec.seed)
    tasks = [(b, j) for b in spec.backbones for j in range(spec.folds)]
    args = [(feats, spec, b, j, train_indices(folds, j), folds[j]) for b, j in tasks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_job, *zip(*args)))
    else:
        results = [_fold_job(*a) for a in args]
    runs = []
    for b in spec.backbones:
        for r, (variant, strategy) in enumerate(spec.rows):
            run = RunReport(b, variant, strategy)
            for (tb, _), reps in zip(tasks, results):
                if tb == b:
                    run.folds.append(reps[r])
            runs.append(run)
    return runs


def matrix_report(runs: list[RunReport], *, seed: int, dataset_hash: str | None = None,
                  extra: dict | None = None) -> dict:
    return {"runs": [r.to_json() for r in runs], "seed": seed, "dataset_hash": dataset_hash,
            **(extra or {})}


# --- PCA of endpoint signals ---------------------------------------------


def endpoint_pca(feats: Features, n_components: int = 3) -> np.ndarray:
    """Project concatenated endpoint series onto their leading principal axes.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.concatenate([feats.sig_a, feats.sig_b], axis=1)
    if x.shape[0] < 2:
        raise DataError("PCA needs at least two streamlines")
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    vt = vt[:n_components]
    pivot = np.argmax(np.abs(vt), axis=1)
    vt = vt * np.sign(vt[np.arange(vt.shape[0]), pivot])[:, None]
    proj = x @ vt.T
    if proj.shape[1] < n_components:
        proj = np.pad(proj, ((0, 0), (0, n_components - proj.shape[1])))
    return proj
