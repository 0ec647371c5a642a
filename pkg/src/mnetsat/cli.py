"""Command-line entry point: ``mnetsat <command> [flags]``.

Commands: train, eval, infer, shapecheck, gradcheck, synth. Every command
prints its fully resolved configuration (as JSON) before doing any work.
Exit status is 0 on success, 2 for usage errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, find_pairs, load_dataset, read_image, resize, Sample, write_image, write_mask
from .model import REFERENCE_ENCODER_DIMS, Ablation, ModelConfig, build, encoder_rows, trace_shapes
from .tensor import NonFiniteError, ShapeError, TapeError

log = logging.getLogger("mnetsat")

MODEL_KEYS = {"input": int, "base_filters": int, "stages": int}
TRAIN_KEYS = {"epochs": int, "batch": int, "lr": float, "augment": int}
DEFAULTS = {
    "seed": 0, "input": 64, "base_filters": 8, "stages": 4,
    "epochs": 30, "batch": 8, "lr": 1e-4, "augment": 8, "threshold": 0.5,
}
COMMANDS = ("train", "eval", "infer", "shapecheck", "gradcheck", "synth")


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def parse_ablation(items: Sequence[str]) -> dict[str, bool]:
    valid = Ablation.names()
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--ablation expects name=bool, got {item!r}")
        name, value = (p.strip() for p in item.split("=", 1))
        if name not in valid:
            raise UsageError(f"unknown ablation {name!r}; choose from {', '.join(valid)}")
        out[name] = _parse_bool(value)
    return out


def _add_common(p: argparse.ArgumentParser, *, model=True, train=False, data=True) -> None:
    p.add_argument("--config", help="flat key=value file; command-line flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    if data:
        p.add_argument("--data", help="dataset root (images/, masks/, manifest.jsonl)")
    if model:
        p.add_argument("--input", type=int, help="square input extent")
        p.add_argument("--base-filters", type=int, dest="base_filters")
        p.add_argument("--stages", type=int)
        p.add_argument("--ablation", action="append", default=[], metavar="NAME=BOOL")
    if train:
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--augment", type=int, help="augmented copies per training image")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnetsat", description="Polyp segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write log + checkpoints")
    _add_common(p, train=True)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write metric CSVs")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("infer", help="write probability maps (PGM) and masks (PNG)")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("shapecheck", help="print and validate the layer shape trace")
    _add_common(p, data=False)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p, model=False, data=False)
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--cases", nargs="*", help="subset of case names")
    p.add_argument("--max-entries", type=int, default=48, dest="max_entries")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p, model=False, data=False)
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--input", type=int, help="image extent (default 64)")
    return parser


def _read_config(path: str) -> dict:
    from .training import read_config_file

    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return read_config_file(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (flags win) into one dict."""
    file_values = _read_config(args.config) if getattr(args, "config", None) else {}
    resolved: dict = {"command": args.command}
    keys = ["seed", "out", "data", "threshold", *MODEL_KEYS, *TRAIN_KEYS]
    types = {**MODEL_KEYS, **TRAIN_KEYS, "seed": int, "threshold": float}
    for key in keys:
        if not hasattr(args, key):
            continue
        value = getattr(args, key)
        if value is None and key in file_values:
            try:
                value = types.get(key, str)(file_values[key])
            except ValueError:
                raise UsageError(f"config value for {key!r} is invalid: {file_values[key]!r}") from None
        if value is None:
            value = DEFAULTS.get(key)
        resolved[key] = value
    if hasattr(args, "ablation"):
        from_file = [f"{k.split('.', 1)[1]}={v}" for k, v in file_values.items() if k.startswith("ablation.")]
        ablation = asdict(Ablation())
        ablation.update(parse_ablation(from_file))
        ablation.update(parse_ablation(args.ablation))
        resolved["ablation"] = ablation
    for extra in ("checkpoint", "split", "precision", "cases", "max_entries", "tolerance", "count"):
        if hasattr(args, extra):
            resolved[extra] = getattr(args, extra)
    return resolved


def model_config(r: dict) -> ModelConfig:
    return ModelConfig(input_size=r["input"], base_filters=r["base_filters"], stages=r["stages"],
                       ablation=Ablation(**r["ablation"]))


def _require(r: dict, *keys: str) -> None:
    missing = [k for k in keys if not r.get(k)]
    if missing:
        raise UsageError(f"{r['command']} needs --{' --'.join(m.replace('_', '-') for m in missing)}")


# -- commands -------------------------------------------------------------------


def cmd_synth(r: dict) -> int:
    from .synth import synth_generate

    _require(r, "out")
    size = r["input"] if r.get("input") else 64
    root = synth_generate(r["out"], r["count"], size=size, seed=r["seed"])
    print(f"wrote {r['count']} samples to {root}")
    return 0


def cmd_shapecheck(r: dict) -> int:
    cfg = model_config(r)
    trace = trace_shapes(cfg)
    print(trace.format())
    rows = encoder_rows(trace, cfg.stages)
    print("\nencoder rows:")
    for name, h, w, c in rows:
        print(f"  {name:<6} {h} x {w} x {c}")
    if r["out"]:
        Path(r["out"]).mkdir(parents=True, exist_ok=True)
        (Path(r["out"]) / "shapes.csv").write_text(trace.to_csv())
    if cfg.input_size == (512, 512) and cfg.base_filters == 64 and cfg.stages == 5:
        mismatched = [(got, want) for got, want in zip(rows, REFERENCE_ENCODER_DIMS) if tuple(got) != want]
        if mismatched or len(rows) != len(REFERENCE_ENCODER_DIMS):
            for got, want in mismatched:
                print(f"MISMATCH {got} != reference {want}", file=sys.stderr)
            return 1
        print("encoder rows match the reference table")
    return 0


def cmd_gradcheck(r: dict) -> int:
    from .gradcheck import run_suite

    try:
        results = run_suite(r["cases"] or None, bits=r["precision"], seed=r["seed"], max_entries=r["max_entries"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    failed = 0
    for res in results:
        ok = res.passed(r["tolerance"])
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {res.name:<24} max_rel_error={res.max_rel_error:.3e} "
              f"checked={res.checked} worst={res.worst_input}")
    print(f"{len(results) - failed}/{len(results)} cases within {r['tolerance']:g}")
    return 1 if failed else 0


def cmd_train(r: dict) -> int:
    from .training import TrainConfig, train

    _require(r, "data", "out")
    cfg = model_config(r)
    data = load_dataset(r["data"], size=cfg.input_size, seed=r["seed"])
    model = build(cfg, seed=r["seed"])
    tcfg = TrainConfig(lr=r["lr"], batch_size=r["batch"], epochs=r["epochs"], augment_per_image=r["augment"],
                       seed=r["seed"], threshold=r["threshold"])
    out = Path(r["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(r, indent=2, sort_keys=True) + "\n")
    result = train(model, data, tcfg, out_dir=out,
                   on_epoch=lambda row: print(f"epoch {row['epoch']}: loss {row['train_loss']:.5f} "
                                              f"val_dsc {row['val_dsc']:.4f} lr {row['lr']:.3g}", flush=True))
    save_checkpoint(out / "final.ckpt", model.state_dict())
    print(f"best val DSC {result.best_val_dsc:.4f} at epoch {result.best_epoch}; checkpoint {result.checkpoint}")
    return 0


def _load_model(r: dict):
    cfg = model_config(r)
    model = build(cfg, seed=r["seed"])
    model.load_state_dict(load_checkpoint(r["checkpoint"]))
    return model


def cmd_eval(r: dict) -> int:
    from .metrics import evaluate, predict, sweep

    _require(r, "data")
    model = _load_model(r)
    samples = load_dataset(r["data"], size=model.cfg.input_size, splits=[r["split"]], seed=r["seed"])[r["split"]]
    probs = predict(model, np.stack([s.image for s in samples]).astype(np.float32))
    report = evaluate(model, samples, r["threshold"], probs=probs)
    agg = report.aggregate
    print(f"{r['split']}: DSC {agg.dsc:.4f} IoU {agg.iou:.4f} Pre {agg.precision:.4f} Rec {agg.recall:.4f} "
          f"over {len(samples)} images")
    if r["out"]:
        out = Path(r["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv())
        table = sweep(list(probs), [s.mask for s in samples], np.linspace(0.0, 1.0, 101))
        (out / "roc_pr.csv").write_text(table.to_csv())
    return 0


def cmd_infer(r: dict) -> int:
    from .metrics import binarize, predict

    _require(r, "data", "out")
    model = _load_model(r)
    root = Path(r["data"])
    folder = root / "images" if (root / "images").is_dir() else root
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".png", ".pgm", ".ppm"))
    if not paths:
        raise DataError(f"no images found in {folder}")
    out = Path(r["out"])
    out.mkdir(parents=True, exist_ok=True)
    for path in paths:
        image = read_image(path)
        blank = np.zeros(image.shape[:2] + (1,), dtype=np.float32)
        image = resize(Sample(image, blank, path.stem), model.cfg.input_size).image
        prob = predict(model, image[None].astype(np.float32))[0]
        write_image(out / f"{path.stem}_prob.pgm", prob)
        write_mask(out / f"{path.stem}_mask.png", binarize(prob, r["threshold"]))
    print(f"wrote {len(paths)} prediction pairs to {out}")
    return 0


HANDLERS = {
    "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "shapecheck": cmd_shapecheck, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        resolved = resolve(args)
        print(json.dumps(resolved, indent=2, sort_keys=True), flush=True)
        return HANDLERS[args.command](resolved)
    except UsageError as exc:
        print(f"mnetsat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError, CheckpointError, NonFiniteError, TapeError, OSError, ValueError) as exc:
        print(f"mnetsat {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
