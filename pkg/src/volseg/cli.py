"""``volseg`` command line: phantom, preprocess, train, predict, evaluate, gradcheck, overlay.

Exit codes: 0 success, 2 usage error, 3 input/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import re
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__
from .gradcheck import TOLERANCE, run_suite
from .metrics import aggregate, report_volume
from .overlay import export_overlay
from .phantom import PhantomSpec, write_phantom_dir
from .tensor import ShapeError
from .training import Dataset, NumericError, TrainConfig, single_threaded, train, write_history
from .unet import PRESETS, ModelFormatError, UNetConfig, build_unet, load_model, save_model
from .volume import (
    FormatError,
    Mask,
    Volume,
    atomic_write_bytes,
    binarize,
    crop_centered,
    fuse_masks,
    read_nifti,
    read_srv,
    write_srv,
    zscore_normalize,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("volseg")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration

_MODEL_KEYS = {"preset", "channel_schedule", "skips", "alpha", "seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_PREPROCESS_KEYS = {"target", "margin"}
_PATH_KEYS = {"train_dir", "test_dir", "out_model", "out_history"}
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "preprocess": _PREPROCESS_KEYS, "paths": _PATH_KEYS}

DEFAULT_RUN = {
    "model": {"preset": "desk", "skips": True, "alpha": 0.3, "seed": 0},
    "train": {},
    "preprocess": {"target": [128, 128, 64], "margin": 4},
    "paths": {},
}


def load_run_config(path: str) -> dict:
    """Read a JSON or TOML run file; unknown sections or keys are rejected."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.endswith(".toml"):
            cfg = tomllib.loads(raw.decode())
        else:
            cfg = json.loads(raw)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot parse config {path}: {exc}") from exc
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise InputError("config must be a table/object at top level")
    for section, body in cfg.items():
        if section not in _SECTIONS:
            raise InputError(f"unknown config section {section!r}; allowed: {sorted(_SECTIONS)}")
        if not isinstance(body, dict):
            raise InputError(f"config section {section!r} must be a table")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise InputError(f"unknown keys in [{section}]: {sorted(unknown)}")


def merge_config(base: dict, override: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, body in override.items():
        out.setdefault(section, {}).update({k: v for k, v in body.items() if v is not None})
    return out


def model_config(section: dict) -> UNetConfig:
    schedule = section.get("channel_schedule") or PRESETS[section.get("preset", "desk")]
    return UNetConfig(channel_schedule=list(schedule), skips=bool(section.get("skips", True)),
                      alpha=float(section.get("alpha", 0.3)))


# ---------------------------------------------------------------------------
# File helpers


def _read_any(path: str):
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    if path.endswith((".nii", ".nii.gz")):
        return read_nifti(path)
    return read_srv(path)


def _read_volume(path: str) -> Volume:
    obj = _read_any(path)
    return obj if isinstance(obj, Volume) else Volume(obj.data.astype(np.float32), obj.spacing_mm)


def _read_mask(path: str) -> Mask:
    obj = _read_any(path)
    if isinstance(obj, Mask):
        return obj
    return Mask((obj.data > 0.5).astype(np.uint8), obj.spacing_mm)


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def _ids(directory: str, suffix: str) -> list[str]:
    if not os.path.isdir(directory):
        raise InputError(f"not a directory: {directory}")
    names = [os.path.basename(p)[: -len(suffix)] for p in glob.glob(os.path.join(directory, f"*{suffix}"))]
    return sorted(names, key=_natural_key)


def load_dataset(directory: str, split: str) -> Dataset:
    """Pairs ``{id}_vol.srv`` / ``{id}_mask.srv`` from a preprocessed directory."""
    ids = _ids(directory, "_vol.srv")
    if not ids:
        raise InputError(f"{directory}: no *_vol.srv files")
    samples = []
    for i in ids:
        mask_path = os.path.join(directory, f"{i}_mask.srv")
        if not os.path.exists(mask_path):
            raise InputError(f"{directory}: {i}_vol.srv has no matching {i}_mask.srv")
        samples.append((_read_volume(os.path.join(directory, f"{i}_vol.srv")), _read_mask(mask_path)))
    try:
        return Dataset(samples, split, ids)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _write_json(path: str, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# Commands


def cmd_phantom(args) -> int:
    spec = PhantomSpec(size=args.size, count=args.count, seed=args.seed, noise_std=args.noise_std)
    t0 = time.perf_counter()
    write_phantom_dir(spec, args.out)
    log.info("phantom: %d samples in %.2fs", spec.count, time.perf_counter() - t0)
    return EXIT_OK


def _preprocess_one(vol: Volume, left: Mask, right: Mask, target, margin: int):
    mask = fuse_masks(left, right)
    cv, cm, _ = crop_centered(vol, mask, target, margin)
    return zscore_normalize(cv), cm


def cmd_preprocess(args) -> int:
    target = tuple(args.target)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.phantom_dir:
        ids = _ids(args.phantom_dir, "_vol.srv")
        if not ids:
            raise InputError(f"{args.phantom_dir}: no *_vol.srv files")
        jobs = [(i, os.path.join(args.phantom_dir, f"{i}_vol.srv"),
                 os.path.join(args.phantom_dir, f"{i}_maskL.srv"),
                 os.path.join(args.phantom_dir, f"{i}_maskR.srv")) for i in ids]
    else:
        if not (args.volume and args.mask_left and args.mask_right):
            raise UsageError("preprocess needs --phantom-dir or all of --volume, --mask-left, --mask-right")
        jobs = [(args.id, args.volume, args.mask_left, args.mask_right)]
    results = []
    for sid, vpath, lpath, rpath in jobs:
        vol, left, right = _read_volume(vpath), _read_mask(lpath), _read_mask(rpath)
        try:
            results.append((sid, *_preprocess_one(vol, left, right, target, args.margin)))
        except ValueError as exc:
            raise InputError(f"{sid}: {exc}") from exc
    for sid, v, m in results:
        write_srv(v, os.path.join(args.out_dir, f"{sid}_vol.srv"))
        write_srv(m, os.path.join(args.out_dir, f"{sid}_mask.srv"))
    log.info("preprocess: wrote %d pairs to %s", len(results), args.out_dir)
    return EXIT_OK


def cmd_train(args) -> int:
    run = DEFAULT_RUN
    if args.config:
        run = merge_config(run, load_run_config(args.config))
    cli = {
        "model": {"preset": args.preset, "seed": args.seed, "skips": False if args.no_skips else None},
        "train": {"epochs": args.epochs, "lr": args.lr, "loss_kind": args.loss, "seed": args.seed,
                  "threshold": args.threshold},
        "paths": {"train_dir": args.train_dir, "test_dir": args.test_dir,
                  "out_model": args.out_model, "out_history": args.out_history},
    }
    run = merge_config(run, cli)
    print("effective config: " + json.dumps(run, sort_keys=True), file=sys.stderr)
    paths = run["paths"]
    for key in ("train_dir", "out_model", "out_history"):
        if not paths.get(key):
            raise UsageError(f"train needs {key} (flag --{key.replace('_', '-')} or [paths] in config)")
    try:
        mcfg = model_config(run["model"])
        tcfg = TrainConfig(**run["train"])
    except (ValueError, TypeError, KeyError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    train_set = load_dataset(paths["train_dir"], "train")
    test_set = load_dataset(paths["test_dir"], "test") if paths.get("test_dir") else None
    model = build_unet(mcfg, seed=int(run["model"].get("seed", 0)))
    t0 = time.perf_counter()
    try:
        model, history = train(model, train_set, test_set, tcfg)
    except ShapeError as exc:
        raise InputError(str(exc)) from exc
    log.info("train: %d epochs in %.1fs", len(history), time.perf_counter() - t0)
    save_model(model, paths["out_model"])
    write_history(history, paths["out_history"])
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    if args.in_dir:
        if not args.out_dir:
            raise UsageError("--in-dir requires --out-dir")
        ids = _ids(args.in_dir, "_vol.srv")
        jobs = [(os.path.join(args.in_dir, f"{i}_vol.srv"), os.path.join(args.out_dir, f"{i}_prob.srv"),
                 os.path.join(args.out_dir, f"{i}_pred.srv"), i) for i in ids]
        os.makedirs(args.out_dir, exist_ok=True)
    else:
        if not (args.volume and args.out_prob and args.out_mask):
            raise UsageError("predict needs --in-dir/--out-dir or --volume, --out-prob and --out-mask")
        jobs = [(args.volume, args.out_prob, args.out_mask, "0")]
    t0 = time.perf_counter()
    outputs = []
    for vpath, ppath, mpath, sid in jobs:
        vol = _read_volume(vpath)
        try:
            prob = model.predict_proba(vol.data)
        except ShapeError as exc:
            raise InputError(f"{vpath}: {exc}") from exc
        if not np.all(np.isfinite(prob)):
            raise NumericError(f"{vpath}: non-finite probabilities")
        outputs.append((sid, vol, Volume(prob, vol.spacing_mm), ppath, mpath))
    for sid, vol, prob, ppath, mpath in outputs:
        pred = binarize(prob, args.threshold)
        write_srv(prob, ppath)
        write_srv(pred, mpath)
        if args.overlay_dir:
            os.makedirs(args.overlay_dir, exist_ok=True)
            export_overlay(vol, pred, os.path.join(args.overlay_dir, sid))
    log.info("predict: %d volumes in %.2fs", len(outputs), time.perf_counter() - t0)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.pred_dir and args.gt_dir:
        ids = _ids(args.pred_dir, "_pred.srv")
        if not ids:
            raise InputError(f"{args.pred_dir}: no *_pred.srv files")
        pairs = [(i, os.path.join(args.pred_dir, f"{i}_pred.srv"), os.path.join(args.gt_dir, f"{i}_mask.srv"))
                 for i in ids]
    elif args.pred and args.gt:
        pairs = [(args.id, args.pred, args.gt)]
    else:
        raise UsageError("evaluate needs --pred-dir and --gt-dir, or --pred and --gt")
    reports = []
    for sid, ppath, gpath in pairs:
        try:
            reports.append(report_volume(_read_mask(ppath), _read_mask(gpath), sid))
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise InputError(f"{sid}: {exc}") from exc
    agg = aggregate(reports, micro=args.micro)
    os.makedirs(args.out_dir, exist_ok=True)
    _write_json(os.path.join(args.out_dir, "reports.json"), [r.to_dict() for r in reports])
    _write_json(os.path.join(args.out_dir, "aggregate.json"), agg)
    print(json.dumps(agg["mean"], sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    worst = run_suite(seed=args.seed, cases=args.cases)
    failed = False
    for name, err in worst.items():
        ok = err < TOLERANCE
        failed |= not ok
        print(f"{name:20s} {err:.3e} {'ok' if ok else 'FAIL'}")
    log.info("gradcheck: %.1fs", time.perf_counter() - t0)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_overlay(args) -> int:
    vol, mask = _read_volume(args.volume), _read_mask(args.mask)
    try:
        export_overlay(vol, mask, args.out)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"volseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic ellipsoid phantoms")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="fuse masks, crop around the ROI, z-score")
    p.add_argument("--phantom-dir")
    p.add_argument("--volume")
    p.add_argument("--mask-left")
    p.add_argument("--mask-right")
    p.add_argument("--id", default="0")
    p.add_argument("--target", type=int, nargs=3, default=[128, 128, 64], metavar=("X", "Y", "Z"))
    p.add_argument("--margin", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a U-Net on a preprocessed directory")
    p.add_argument("--config")
    p.add_argument("--train-dir")
    p.add_argument("--test-dir")
    p.add_argument("--out-model")
    p.add_argument("--out-history")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=["bce_with_logits", "soft_dice"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-skips", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="probability map and binary mask for volumes")
    p.add_argument("--model", required=True)
    p.add_argument("--volume")
    p.add_argument("--out-prob")
    p.add_argument("--out-mask")
    p.add_argument("--in-dir")
    p.add_argument("--out-dir")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlay-dir")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-volume and aggregate overlap metrics")
    p.add_argument("--pred-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--id", default="0")
    p.add_argument("--micro", action="store_true", help="pool counts instead of averaging volumes")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overlay", help="axial/coronal/sagittal boundary PNGs")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="output prefix or directory")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with single_threaded():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"volseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"volseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, ModelFormatError, OSError, ValueError) as exc:
        print(f"volseg: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
