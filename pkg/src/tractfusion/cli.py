"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 numeric
failure. Errors are printed to stderr as one JSON line; success prints a JSON
summary line to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import KINDS
from .dataset import dataset_hash, load_features, write_dataset
from .errors import DataError, NumericError, TractFusionError
from .evaluation import (
    FoldReport,
    MatrixSpec,
    RunReport,
    endpoint_pca,
    kfold_split,
    matrix_report,
    run_matrix,
    substream,
)
from .fmri import (
    DEFAULT_BOXCAR_RADIUS,
    DEFAULT_CUTOFF_HZ,
    DEFAULT_FWHM_MM,
    denoise,
    read_grid,
    read_mask,
    write_grid,
)
from .fusion import (
    STRATEGIES,
    FusedModel,
    FusionConfig,
    PretrainedBackbone,
    TrainConfig,
    predict_class,
    pretrain,
    train_stage2,
)
from .auxiliary import VARIANTS
from .phantom import PhantomSpec, generate
from .streamlines import CLASS_NAMES, DEFAULT_NEIGHBORS, DEFAULT_POINTS

log = logging.getLogger("tractfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "seed": 0,
    "n_points": DEFAULT_POINTS,
    "k": DEFAULT_NEIGHBORS,
    "folds": 5,
    "tied": True,
    "pretrain": {"epochs": 30, "batch_size": 512, "lr": 1e-4},
    "stage2": {"epochs": 20, "batch_size": 512, "lr": 1e-4},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config --------------------------------------------------------------


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    unknown = set(user) - set(cfg)
    if unknown:
        raise DataError(f"{p}: unknown config keys {sorted(unknown)}")
    for key, value in user.items():
        if isinstance(cfg[key], dict):
            extra = set(value) - set(cfg[key])
            if extra:
                raise DataError(f"{p}: unknown keys in {key!r}: {sorted(extra)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def _resolve(args) -> dict:
    """Config file, then command-line overrides."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    stage = getattr(args, "stage", None)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None and stage is not None:
            cfg[stage][key] = value
    if getattr(args, "folds", None) is not None:
        cfg["folds"] = args.folds
    return cfg


def _train_config(cfg: dict, stage: str) -> TrainConfig:
    return TrainConfig(**cfg[stage])


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _features(args, cfg):
    return load_features(_require(args.data, "data directory"), n_points=cfg["n_points"],
                         k=cfg["k"])


def _write_json(path, obj, args) -> None:
    if not args.no_timestamp:
        obj = {**obj, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- subcommands ---------------------------------------------------------


def cmd_phantom(args, cfg):
    spec = PhantomSpec.load(_require(args.spec, "phantom spec"))
    if args.seed is not None:
        spec.rng_seed = args.seed
    bundle, grid, mask = generate(spec)
    write_dataset(args.out, bundle, grid, mask, {"phantom": spec.to_json()})
    return {"out": str(args.out), "streamlines": len(bundle), "dims": list(grid.dims),
            "frames": grid.frames}


def cmd_denoise(args, cfg):
    grid = read_grid(_require(args.grid, "grid"))
    mask = read_mask(_require(args.mask, "mask"))
    out = denoise(grid, mask, args.fwhm, args.highpass, args.boxcar)
    write_grid(args.out, out)
    return {"out": str(args.out), **out.provenance["denoise"]}


def cmd_pretrain(args, cfg):
    feats = _features(args, cfg)
    seed = cfg["seed"]
    pb = pretrain(feats, np.arange(len(feats)), args.backbone, _train_config(cfg, "pretrain"),
                  init_rng=substream(seed, "pretrain-init", args.backbone),
                  shuffle_rng=substream(seed, "pretrain-shuffle", args.backbone))
    pb.save(args.out)
    return {"out": str(args.out), "backbone": args.backbone,
            "final_loss": pb.history[-1] if pb.history else None}


def cmd_train(args, cfg):
    feats = _features(args, cfg)
    pb = PretrainedBackbone.load(_require(args.backbone_ckpt, "backbone checkpoint"))
    s = cfg["stage2"]
    fc = FusionConfig(args.strategy, pb.kind, args.variant, s["epochs"], s["batch_size"],
                      s["lr"], cfg["tied"])
    seed = cfg["seed"]
    tag = (pb.kind, args.variant, args.strategy)
    model = train_stage2(pb, feats, np.arange(len(feats)), fc,
                         init_rng=substream(seed, "stage2-init", *tag),
                         shuffle_rng=substream(seed, "stage2-shuffle", *tag))
    model.save(args.out)
    return {"out": str(args.out), **asdict(fc)}


def _predict(args, cfg):
    feats = _features(args, cfg)
    model = FusedModel.load(_require(args.ckpt, "checkpoint"))
    final, _ = model.predict_logits(feats)
    return feats, model, final


def cmd_eval(args, cfg):
    feats, model, final = _predict(args, cfg)
    truth = feats.require_labels()
    pred = predict_class(final)
    folds = kfold_split(truth, cfg["folds"], cfg["seed"])
    fc = model.config
    run = RunReport(fc.backbone_kind, fc.auxiliary_variant, fc.strategy,
                    [FoldReport.from_predictions(j, truth[f], pred[f]) for j, f in enumerate(folds)])
    report = matrix_report([run], seed=cfg["seed"], dataset_hash=dataset_hash(args.data),
                           extra={"checkpoint": str(args.ckpt)})
    _write_json(args.out, report, args)
    return {"out": str(args.out), "mean_f1": run.mean_f1, "std_f1": run.std_f1}


def cmd_ablate(args, cfg):
    feats = _features(args, cfg)
    spec = MatrixSpec(backbones=tuple(args.backbones), folds=cfg["folds"], seed=cfg["seed"],
                      pretrain=_train_config(cfg, "pretrain"),
                      stage2=_train_config(cfg, "stage2"), tied=cfg["tied"])
    runs = run_matrix(feats, spec, jobs=args.jobs)
    report = matrix_report(runs, seed=cfg["seed"], dataset_hash=dataset_hash(args.data),
                           extra={"config": spec.to_json()})
    _write_json(args.out, report, args)
    return {"out": str(args.out), "runs": len(runs),
            "mean_f1": {f"{r.backbone}/{r.variant}/{r.strategy}": r.mean_f1 for r in runs}}


def cmd_infer(args, cfg):
    feats, _, final = _predict(args, cfg)
    pred = predict_class(final)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        for sid, p, row in zip(feats.ids, pred, final):
            fh.write(json.dumps({"id": int(sid), "label": int(p), "class": CLASS_NAMES[p],
                                 "logits": [float(v) for v in row]}) + "\n")
    return {"out": str(args.out), "streamlines": int(pred.size)}


def cmd_pca(args, cfg):
    feats = _features(args, cfg)
    proj = endpoint_pca(feats)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "pc1", "pc2", "pc3"])
        labels = feats.labels if feats.labels is not None else [None] * len(feats)
        for sid, lab, row in zip(feats.ids, labels, proj):
            w.writerow([int(sid), "" if lab is None else int(lab), *(repr(float(v)) for v in row)])
    return {"out": str(args.out), "streamlines": len(feats)}


# --- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--no-timestamp", action="store_true",
                        help="omit the timestamp field from reports")
    common.add_argument("-v", "--verbose", action="store_true")

    def hyper(p, stage):
        p.set_defaults(stage=stage)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)

    parser = _Parser(prog="tractfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("denoise", parents=[common], help="denoise an fMRI grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fwhm", type=float, default=DEFAULT_FWHM_MM)
    p.add_argument("--highpass", type=float, default=DEFAULT_CUTOFF_HZ)
    p.add_argument("--boxcar", type=int, default=DEFAULT_BOXCAR_RADIUS)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("pretrain", parents=[common], help="train the geometric backbone")
    p.add_argument("--data", required=True)
    p.add_argument("--backbone", choices=KINDS, default="tractcloud")
    p.add_argument("--out", required=True)
    hyper(p, "pretrain")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="train the auxiliary pathway")
    p.add_argument("--data", required=True)
    p.add_argument("--backbone-ckpt", required=True)
    p.add_argument("--variant", choices=VARIANTS + ("none",), default="full")
    p.add_argument("--strategy", choices=STRATEGIES, default="logits_add")
    p.add_argument("--out", required=True)
    hyper(p, "stage2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint over k folds")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="cross-validate the full matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--backbones", nargs="+", choices=KINDS, default=list(KINDS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", parents=[common], help="predict labels with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("pca-endpoints", parents=[common],
                       help="3-component PCA of endpoint signals to CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split()),
                                 "exit": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = _resolve(args)
        summary = args.func(args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (DataError, FileNotFoundError, KeyError, TypeError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except TractFusionError as exc:
        return _fail(EXIT_DATA, "data", exc)
    sys.stdout.write(json.dumps({"command": args.command, "status": "ok", **summary},
                                sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
