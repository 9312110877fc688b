"""Class weighting, logit fusion and the two training stages."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autonet import Affine, ParamStore, ReLU, Sequential, fit, load_into, read_manifest, \
    save_checkpoint, softmax_xent
from .auxiliary import Auxiliary
from .backbone import GLOBAL_DIM, KINDS, Backbone
from .dataset import Features
from .errors import DataError
from .streamlines import CLASS_NAMES, N_CLASSES, NormTransform, fit_normalization

log = logging.getLogger(__name__)

STRATEGIES = ("logits_add", "concat")
AUX_VARIANTS = ("full", "endpoint_only", "fmri_only", "none")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class ClassWeights:
    N: int
    c: int
    n_c: tuple[int, ...]
    w_c: tuple[float, ...]

    @property
    def array(self) -> np.ndarray:
        return np.array(self.w_c)


def class_weights(labels, n_classes: int = N_CLASSES) -> ClassWeights:
    """``w_c = N / (c * n_c)`` for every class; all classes must be present."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    missing = [CLASS_NAMES[i] if n_classes == len(CLASS_NAMES) else str(i)
               for i in np.flatnonzero(counts == 0)]
    if missing:
        raise DataError(f"class weights undefined: no samples for class {', '.join(missing)}")
    n = int(labels.size)
    w = tuple(n / (n_classes * int(k)) for k in counts)
    return ClassWeights(n, n_classes, tuple(int(k) for k in counts), w)


def fuse_logits(lb: np.ndarray, la: np.ndarray) -> np.ndarray:
    return np.asarray(lb, dtype=np.float64) + np.asarray(la, dtype=np.float64)


def predict_class(logits: np.ndarray) -> np.ndarray:
    """Index of the maximum along the last axis; ties go to the lowest index."""
    return np.argmax(logits, axis=-1)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 512
    lr: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise DataError(f"invalid training config {self}")


def pretrain_defaults() -> TrainConfig:
    return TrainConfig(epochs=30, batch_size=512, lr=1e-4)


@dataclass
class FusionConfig:
    strategy: str = "logits_add"
    backbone_kind: str = "tractcloud"
    auxiliary_variant: str = "full"
    epochs: int = 20
    batch_size: int = 512
    lr: float = 1e-4
    tied: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DataError(f"unknown fusion strategy {self.strategy!r}")
        if self.backbone_kind not in KINDS:
            raise DataError(f"unknown backbone kind {self.backbone_kind!r}")
        if self.auxiliary_variant not in AUX_VARIANTS:
            raise DataError(f"unknown auxiliary variant {self.auxiliary_variant!r}")
        if self.strategy == "concat" and self.auxiliary_variant == "none":
            raise DataError("concat fusion requires an auxiliary pathway")
        TrainConfig(self.epochs, self.batch_size, self.lr)

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr)


# --- stage 1 --------------------------------------------------------------


@dataclass
class PretrainedBackbone:
    model: Backbone
    transform: NormTransform
    history: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model.kind

    def encode(self, feats: Features, idx=None):
        """Global features and logits for ``idx`` (default all), in fixed chunks."""
        idx = np.arange(len(feats)) if idx is None else np.asarray(idx)
        with_nb = self.model.uses_neighbors
        return self.model.predict_batched(
            lambda j: feats.backbone_inputs(idx[j], self.transform, with_nb), idx.size,
            EVAL_CHUNK)

    def meta(self) -> dict:
        return {"model_kind": self.kind, "normalization": self.transform.to_json(),
                "train": self.config, "history": self.history}

    def save(self, path) -> None:
        save_checkpoint(path, self.model.store, self.kind, self.meta())

    @classmethod
    def load(cls, path) -> "PretrainedBackbone":
        manifest = read_manifest(path)
        kind = manifest["kind"]
        if kind not in KINDS:
            raise DataError(f"{path}: checkpoint kind {kind!r} is not a backbone")
        model = Backbone(kind)
        load_into(path, model.store, kind)
        meta = manifest["meta"]
        return cls(model, NormTransform.from_json(meta["normalization"]),
                   meta.get("history", []), meta.get("train", {}))


def pretrain(feats: Features, train_idx, kind: str = "tractcloud",
             config: TrainConfig | None = None, *, init_rng: np.random.Generator,
             shuffle_rng: np.random.Generator) -> PretrainedBackbone:
    """Train the geometric backbone alone with class-weighted cross-entropy."""
    config = config or pretrain_defaults()
    train_idx = np.asarray(train_idx)
    labels = feats.require_labels()[train_idx]
    weights = class_weights(labels).array
    tf = fit_normalization(feats.points[train_idx])
    model = Backbone(kind, init_rng)
    with_nb = model.uses_neighbors

    def step(batch):
        rows = train_idx[batch]
        logits = model.forward(**feats.backbone_inputs(rows, tf, with_nb))
        loss, d = softmax_xent(logits, feats.labels[rows], weights)
        model.backward(d)
        return loss

    history = fit(step, model.store, train_idx.size, epochs=config.epochs,
                  batch_size=config.batch_size, lr=config.lr, rng=shuffle_rng,
                  tag=f"pretrain[{kind}]")
    return PretrainedBackbone(model, tf, history, asdict(config))


# --- stage 2 --------------------------------------------------------------


def _clone(pb: PretrainedBackbone) -> PretrainedBackbone:
    """Copy of a pretrained backbone in a fresh store (values and moments)."""
    model = Backbone(pb.kind, np.random.default_rng(0), ParamStore(), pb.model.group_name)
    src = pb.model.store[pb.model.group_name]
    dst = model.store[pb.model.group_name]
    for which in ("value", "m", "v"):
        for p_src, p_dst in zip(src, dst):
            getattr(p_dst, which)[...] = getattr(p_src, which)
    model.store.step = pb.model.store.step
    return PretrainedBackbone(model, pb.transform, list(pb.history), dict(pb.config))


class FusedModel:
    """Frozen backbone plus a trainable auxiliary pathway (and concat head)."""

    def __init__(self, backbone: PretrainedBackbone, config: FusionConfig,
                 rng: np.random.Generator | None = None):
        if backbone.kind != config.backbone_kind:
            raise DataError(
                f"backbone checkpoint is {backbone.kind!r}, config wants {config.backbone_kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.backbone = _clone(backbone)
        self.store: ParamStore = self.backbone.model.store
        self.store.freeze(self.backbone.model.group_name)
        self.aux = None
        self.head = None
        variant = config.auxiliary_variant
        if variant != "none":
            self.aux = Auxiliary(variant, rng, self.store, tied=config.tied,
                                 head=config.strategy == "logits_add")
        if config.strategy == "concat":
            g = self.store.group("fusion_head")
            self.head = Sequential([
                Affine(g, "fusion_head.0", GLOBAL_DIM + self.aux.feature_dim, 256, rng),
                ReLU(),
                Affine(g, "fusion_head.1", 256, N_CLASSES, rng),
            ], name="fusion_head")

    @property
    def transform(self) -> NormTransform:
        return self.backbone.transform

    def head_forward(self, lb, gfeat, aux_inputs):
        """Final logits from precomputed backbone outputs."""
        if self.config.strategy == "concat":
            f = self.aux.features(**aux_inputs)
            return self.head.forward(np.concatenate([gfeat, f], axis=1))
        if self.aux is None:
            return np.array(lb, dtype=np.float64, copy=True)
        return fuse_logits(lb, self.aux.forward(**aux_inputs))

    def head_backward(self, dfinal):
        if self.config.strategy == "concat":
            d = self.head.backward(dfinal)
            self.aux.backward_features(d[:, GLOBAL_DIM:])
        elif self.aux is not None:
            self.aux.backward(dfinal)

    def predict_logits(self, feats: Features, idx=None, backbone_out=None):
        """``(logits_final, logits_backbone)`` for ``idx`` (default: all samples)."""
        idx = np.arange(len(feats)) if idx is None else np.asarray(idx)
        gfeat, lb = backbone_out if backbone_out is not None else self.backbone.encode(feats, idx)
        out = []
        for start in range(0, idx.size, EVAL_CHUNK):
            j = np.arange(start, min(idx.size, start + EVAL_CHUNK))
            out.append(self.head_forward(lb[j], gfeat[j],
                                         feats.aux_inputs(idx[j], self.transform)))
        final = np.concatenate(out) if out else np.zeros((0, N_CLASSES))
        return final, lb

    def save(self, path) -> None:
        meta = {**self.backbone.meta(), "fusion": asdict(self.config),
                "auxiliary_kind": None if self.aux is None else f"auxiliary:{self.aux.variant}"}
        save_checkpoint(path, self.store, "fused", meta)

    @classmethod
    def load(cls, path) -> "FusedModel":
        manifest = read_manifest(path)
        if manifest["kind"] != "fused":
            raise DataError(f"{path}: checkpoint kind {manifest['kind']!r}, expected 'fused'")
        meta = manifest["meta"]
        config = FusionConfig(**meta["fusion"])
        bb = PretrainedBackbone(Backbone(meta["model_kind"]),
                                NormTransform.from_json(meta["normalization"]),
                                meta.get("history", []), meta.get("train", {}))
        model = cls(bb, config)
        load_into(path, model.store, "fused")
        return model


def train_stage2(backbone: PretrainedBackbone, feats: Features, train_idx,
                 config: FusionConfig, *, init_rng: np.random.Generator,
                 shuffle_rng: np.random.Generator, backbone_out=None) -> FusedModel:
    """Train the auxiliary pathway on top of the frozen backbone.

    ``backbone_out`` may carry precomputed ``(global_feature, logits)`` for
    ``train_idx``; the backbone is frozen so they never change.
    """
    train_idx = np.asarray(train_idx)
    labels = feats.require_labels()[train_idx]
    weights = class_weights(labels).array
    model = FusedModel(backbone, config, init_rng)
    model.store.step = 0
    if model.aux is None:
        return model
    if model.aux.uses_func and feats.frames < 1:
        raise DataError("dataset has no fMRI signals")
    gfeat, lb = backbone_out if backbone_out is not None else backbone.encode(feats, train_idx)

    def step(batch):
        rows = train_idx[batch]
        final = model.head_forward(lb[batch], gfeat[batch], feats.aux_inputs(rows, model.transform))
        loss, d = softmax_xent(final, feats.labels[rows], weights)
        model.head_backward(d)
        return loss

    fit(step, model.store, train_idx.size, epochs=config.epochs, batch_size=config.batch_size,
        lr=config.lr, rng=shuffle_rng,
        tag=f"stage2[{config.backbone_kind}/{config.auxiliary_variant}/{config.strategy}]")
    return model
