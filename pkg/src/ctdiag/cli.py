"""``ctdiag`` command line: synth, validate, train, predict, evaluate, analyze, ablate.

Every subcommand resolves one configuration (defaults < ``--config`` YAML <
``--set`` overrides < dedicated flags), writes it to ``<out>/config.yaml``,
prints a JSON summary on stdout and a JSON error object on stderr on failure.
Exit codes: 0 ok, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .data import AnnotationParseError, DatasetValidationError, box_area_histogram, load_dataset, split_stats
from .network.model import ModelConfig, load_checkpoint
from .synth import SynthConfig
from .training.config import TrainConfig

log = logging.getLogger("ctdiag")

SUBCOMMANDS = ("synth", "validate", "train", "predict", "evaluate", "analyze", "ablate")
AREA_EDGES = (0, 64, 128, 256, 512, 1024, 4096)


class UsageError(Exception):
    pass


def _field_names(cls):
    return [f.name for f in fields(cls)]


def default_config() -> dict:
    return {
        "seed": 0,
        "data": {"root": "data", "train_split": "train", "val_split": "val", "test_split": "test"},
        "synth": {k: v for k, v in _dataclass_defaults(SynthConfig).items() if k != "seed"},
        # None means "take it from the preset" (model) or "take it from the model" (stages)
        "model": {"preset": "tiny", **{k: None for k in _field_names(ModelConfig)}},
        "stage1": {k: None if k in ("seed", "input_size") else v
                   for k, v in _dataclass_defaults(TrainConfig).items() if k != "stage"},
        "stage2": {"enabled": True, **{k: None if k in ("seed", "input_size") else v
                                       for k, v in _dataclass_defaults(TrainConfig).items() if k != "stage"}},
        "predict": {"checkpoint": None, "split": "val", "mode": "filtered", "batch_size": 16},
        "eval": {"predictions": None, "annotations": None, "mode": "both"},
        "ablate": {"only": None},
    }


def _dataclass_defaults(cls):
    obj = cls()
    return {k: (list(v) if isinstance(v, tuple) else copy.deepcopy(v)) for k, v in vars(obj).items()}


def _set(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for i, k in enumerate(keys):
        if not isinstance(node, dict) or k not in node:
            raise UsageError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
        if i == len(keys) - 1:
            node[k] = value
        else:
            node = node[k]


def _merge(node: dict, doc: dict, prefix=""):
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if k not in node:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(node[k], dict) and k != "counts":
            if not isinstance(v, dict):
                raise UsageError(f"config key {key!r} must be a mapping")
            _merge(node[k], v, f"{key}.")
        else:
            node[k] = v


def resolve_config(config_path=None, overrides=(), seed=None) -> dict:
    cfg = default_config()
    if config_path is not None:
        try:
            doc = yaml.safe_load(Path(config_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise UsageError(f"cannot read config {config_path}: {e}") from e
        if not isinstance(doc, dict):
            raise UsageError("config file must contain a mapping")
        _merge(cfg, doc)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), yaml.safe_load(raw))
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    m = {k: v for k, v in cfg["model"].items() if v is not None and k != "preset"}
    preset = cfg["model"]["preset"]
    if preset == "tiny":
        return ModelConfig.tiny(**m)
    if preset == "resnet50":
        return ModelConfig(**m)
    raise UsageError(f"unknown model preset {preset!r}")


def train_config(cfg: dict, stage: int, mc: ModelConfig) -> TrainConfig:
    s = dict(cfg[f"stage{stage}"])
    s.pop("enabled", None)
    if s["seed"] is None:
        s["seed"] = cfg["seed"]
    if s["input_size"] is None:
        s["input_size"] = mc.input_size
    if s["input_size"] != mc.input_size:
        raise UsageError(f"stage{stage}.input_size {s['input_size']} differs from model input {mc.input_size}")
    return TrainConfig(stage=stage, **s)


def synth_config(cfg: dict) -> SynthConfig:
    s = dict(cfg["synth"])
    for k in ("lesion_count", "lesion_size"):
        s[k] = tuple(s[k])
    return SynthConfig(seed=cfg["seed"], **s)


def _annotations(cfg: dict, split_key: str) -> Path:
    return Path(cfg["data"]["root"]) / "annotations" / f"{cfg['data'][split_key]}.json"


def _write_snapshot(cfg: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name != "config.yaml"):
        h.update(str(p.relative_to(root)).encode())
        h.update(_sha256(p).encode())
    return h.hexdigest()


# -- subcommands ---------------------------------------------------------------

def cmd_synth(cfg, args, out):
    from .synth import generate_synthetic

    written = generate_synthetic(synth_config(cfg), out)
    return {"annotations": {k: str(v) for k, v in written.items()},
            "checksums": {k: _sha256(v) for k, v in written.items()},
            "dataset_sha256": _tree_digest(out)}


def cmd_validate(cfg, args, out):
    from .plotting import plot_area_histogram

    paths = [Path(p) for p in args.annotations] or [
        _annotations(cfg, k) for k in ("train_split", "val_split", "test_split")
        if _annotations(cfg, k).exists()]
    if not paths:
        raise FileNotFoundError(f"no annotation files found under {cfg['data']['root']}/annotations")
    result = {"valid": True, "files": {}}
    for p in paths:
        try:
            index = load_dataset(p)
        except DatasetValidationError as e:
            result["valid"] = False
            result["files"][str(p)] = {"valid": False, "problems": e.problems}
            continue
        counts = box_area_histogram(index, AREA_EDGES)
        result["files"][str(p)] = {"valid": True, "split": index.split, "counts": split_stats(index),
                                   "box_area_edges": list(AREA_EDGES), "box_area_counts": counts.tolist()}
        plot_area_histogram(AREA_EDGES, counts, out / f"box_areas_{index.split}.svg")
    (out / "validation.json").write_text(json.dumps(result, indent=1) + "\n")
    if not result["valid"]:
        bad = [k for k, v in result["files"].items() if not v["valid"]]
        raise DatasetValidationError([f"{b}: {len(result['files'][b]['problems'])} problem(s)" for b in bad])
    return result


def cmd_train(cfg, args, out):
    from .plotting import plot_loss
    from .training.loop import train_stage1, train_stage2

    mc = model_config(cfg)
    train = load_dataset(_annotations(cfg, "train_split"))
    c1 = train_config(cfg, 1, mc)
    model, rows1 = train_stage1(train, c1, mc, out_dir=out)
    plot_loss(rows1, out / "stage1_loss.svg")
    result = {"stage1": {"checkpoint": str(out / "stage1.pt"), "iterations": len(rows1),
                         "final_loss": rows1[-1]["total"], "loss_log_sha256": _sha256(out / "stage1_loss.csv")}}
    if cfg["stage2"]["enabled"]:
        c2 = train_config(cfg, 2, mc)
        _, rows2 = train_stage2(train, c2, out / "stage1.pt", out_dir=out)
        plot_loss(rows2, out / "stage2_loss.svg")
        result["stage2"] = {"checkpoint": str(out / "stage2.pt"), "iterations": len(rows2),
                            "final_loss": rows2[-1]["total"], "loss_log_sha256": _sha256(out / "stage2_loss.csv")}
    return result


def cmd_predict(cfg, args, out):
    from .evaluation.report import save_predictions
    from .training.loop import predict

    p = cfg["predict"]
    if p["mode"] not in ("filtered", "unfiltered"):
        raise UsageError(f"predict mode must be filtered or unfiltered, got {p['mode']!r}")
    if not p["checkpoint"]:
        raise UsageError("predict needs --checkpoint (or predict.checkpoint)")
    model, _ = load_checkpoint(p["checkpoint"])
    index = load_dataset(Path(cfg["data"]["root"]) / "annotations" / f"{p['split']}.json")
    preds = predict(model, index, p["mode"], int(p["batch_size"]))
    path = save_predictions(preds, out / "predictions.json")
    return {"predictions": str(path), "images": len(preds), "boxes": sum(len(q.boxes) for q in preds),
            "sha256": _sha256(path)}


def _eval_inputs(cfg):
    e = cfg["eval"]
    if not e["predictions"]:
        raise UsageError("needs --predictions (or eval.predictions)")
    ann = e["annotations"] or _annotations(cfg, "val_split")
    return e["predictions"], ann, e["mode"]


def cmd_evaluate(cfg, args, out):
    from .evaluation.report import evaluate_run

    pred, ann, mode = _eval_inputs(cfg)
    report = evaluate_run(pred, ann, mode, out)
    return {"report": str(out / "report.json"), **{k: v for k, v in report.to_dict().items()
                                                   if k != "error_analysis"}}


def cmd_analyze(cfg, args, out):
    from .evaluation.detection import RECALL_POINTS
    from .evaluation.errors import CURVES, curve_areas, error_analysis
    from .evaluation.report import load_predictions
    from .plotting import plot_error_curves

    pred, ann, mode = _eval_inputs(cfg)
    preds, index = load_predictions(pred), load_dataset(ann)
    modes = ("all", "only_tb") if mode == "both" else (mode,)
    result = {}
    for m in modes:
        curves = error_analysis(preds, index, m)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recall", *CURVES])
        for i, r in enumerate(RECALL_POINTS):
            w.writerow([f"{r:.2f}", *(f"{curves[c][i]:.6f}" for c in CURVES)])
        (out / f"error_curves_{m}.csv").write_text(buf.getvalue())
        plot_error_curves(curves, out / f"error_analysis_{m}.svg", title=f"category-agnostic, {m}")
        result[m] = curve_areas(curves)
    return {"areas": result}


def cmd_ablate(cfg, args, out):
    from .ablation import run_ablation
    from .plotting import plot_ablation

    mc = model_config(cfg)
    rows = run_ablation(load_dataset(_annotations(cfg, "train_split")), load_dataset(_annotations(cfg, "val_split")),
                        mc, train_config(cfg, 1, mc), only=cfg["ablate"]["only"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("name", "attention", "encoding", "spe_stn", "spe_side", "ap50", "ap")
    w.writerow(cols)
    for r in rows:
        w.writerow([f"{r[c]:.4f}" if isinstance(r[c], float) else r[c] for c in cols])
    (out / "ablation.csv").write_text(buf.getvalue())
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")
    plot_ablation(rows, out / "ablation.svg")
    return {"table": str(out / "ablation.csv"), "rows": len(rows)}


COMMANDS = {"synth": cmd_synth, "validate": cmd_validate, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "analyze": cmd_analyze, "ablate": cmd_ablate}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file with data/synth/model/stage1/stage2/predict/eval sections")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. model.attention=none (repeatable)")
    common.add_argument("--out", default=None, help="output directory (default: runs/<subcommand>)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--mode", default=None,
                        help="predict: filtered|unfiltered; evaluate/analyze: all|only_tb|both")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="ctdiag", description="Chest X-ray TB diagnosis: data, training, benchmark.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    v = sub.add_parser("validate", parents=[common], help="check annotation files")
    v.add_argument("annotations", nargs="*")
    sub.add_parser("train", parents=[common], help="stage 1, then stage 2 if enabled")
    pr = sub.add_parser("predict", parents=[common], help="checkpoint + split -> predictions JSON")
    pr.add_argument("--checkpoint")
    pr.add_argument("--split")
    for name in ("evaluate", "analyze"):
        e = sub.add_parser(name, parents=[common])
        e.add_argument("--predictions")
        e.add_argument("--annotations")
    sub.add_parser("ablate", parents=[common], help="train and score the 13-model ablation grid")
    return p


def _apply_flags(cfg, args):
    if args.mode is not None:
        _set(cfg, "predict.mode" if args.command == "predict" else "eval.mode", args.mode)
    for flag, key in (("checkpoint", "predict.checkpoint"), ("split", "predict.split"),
                      ("predictions", "eval.predictions"), ("annotations", "eval.annotations")):
        val = getattr(args, flag, None)
        if val is not None and not (flag == "annotations" and args.command == "validate"):
            _set(cfg, key, val)
    if args.command == "synth" and args.out is not None:
        cfg["data"]["root"] = args.out


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args.config, args.overrides, args.seed)
        _apply_flags(cfg, args)
        out = Path(args.out or (cfg["data"]["root"] if args.command == "synth" else f"runs/{args.command}"))
        _write_snapshot(cfg, out)
        result = COMMANDS[args.command](cfg, args, out)
    except UsageError as e:
        _error("usage", str(e))
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (ValueError, TypeError, KeyError, OSError, RuntimeError, AnnotationParseError) as e:
        payload = {"problems": e.problems} if isinstance(e, DatasetValidationError) else {}
        _error(type(e).__name__, str(e), **payload)
        return 1
    json.dump({"command": args.command, "out": str(out), **result}, sys.stdout, indent=1, default=str)
    sys.stdout.write("\n")
    return 0


def _error(kind, message, **extra):
    json.dump({"error": kind, "message": message, **extra}, sys.stderr)
    sys.stderr.write("\n")


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
