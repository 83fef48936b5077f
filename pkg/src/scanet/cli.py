"""scanet command line: prepare, analyze, train, eval, explain, search.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
The default output directory comes from ``SCANET_OUTPUT_DIR`` (else
``./scanet_out``). ``--config FILE.json`` supplies option values; flags given
on the command line win.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import archspec as A
from . import data as D
from . import explain as E
from . import search as Se
from . import train as Tr

log = logging.getLogger("scanet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


DEFAULTS = {
    "prepare": {"seed": 0, "test_per_class": 221, "val_fraction": 0.1, "check_files": True,
                "json": False},
    "analyze": {"input_size": None, "compare": False, "json": False, "accuracy": None},
    "train": {"seed": 0, "epochs": 80, "lr": 1e-4, "batch_size": 32, "beta1": 0.9,
              "image_size": None, "augment": True, "rebalance": True, "max_steps": None,
              "json": False},
    "eval": {"seed": 0, "image_size": None, "json": False},
    "explain": {"seed": 0, "patch": 32, "stride": 16, "baseline": "mean", "border_mass_max": 0.5,
                "target_class": 1, "limit": 8, "image_size": None, "json": False},
    "search": {"seed": 0, "budget": 30, "train_steps": 60, "batch_size": 32, "lr": 0.005,
               "synthetic_size": 2000, "baseline_accuracy": None, "population": 4,
               "json": False},
}


def default_out_dir() -> Path:
    return Path(os.environ.get("SCANET_OUTPUT_DIR", "scanet_out"))


def _load_arch(ref: str) -> A.ArchSpec:
    if ref in ("builtin:resnet50", "resnet50"):
        return A.reference_resnet50()
    path = Path(ref)
    if not path.is_file():
        raise UsageError(f"architecture file not found: {ref}")
    return A.load_archspec(path)


def _merge_config(args, command: str) -> dict:
    cfg = dict(DEFAULTS.get(command, {}))
    if getattr(args, "config", None):
        try:
            cfg.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "command"):
            cfg[k] = v
    return cfg


def _out_dir(cfg: dict, command: str) -> Path:
    out = Path(cfg.get("out") or default_out_dir() / command)
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}
    (out / "run_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True, default=str),
                                         encoding="utf-8")
    return out


# --------------------------------------------------------------------------
# --json payload schemas (JSON Schema draft 7)

_INT = {"type": "integer", "minimum": 0}
_PCT = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_COUNTS = {"type": "object", "required": ["benign", "malignant"],
           "properties": {"benign": _INT, "malignant": _INT}}

SCHEMAS = {
    "analyze": {
        "type": "object", "required": ["reports"],
        "properties": {"reports": {"type": "array", "items": A.ANALYZER_SCHEMA},
                       "comparison": {"type": "object", "required": ["rows", "has_accuracy"]}},
    },
    "prepare": {
        "type": "object", "required": ["records", "classes", "splits", "missing_files", "split_csv"],
        "properties": {
            "records": _INT, "classes": _COUNTS, "missing_files": _INT,
            "split_csv": {"type": "string"},
            "splits": {"type": "object", "required": list(D.SPLITS),
                       "properties": {k: _COUNTS for k in D.SPLITS}},
        },
    },
    "train": {
        "type": "object", "required": ["checkpoint", "steps", "best_epoch", "history"],
        "properties": {
            "checkpoint": {"type": "string"}, "steps": _INT, "best_epoch": _INT,
            "history": {"type": "array", "items": {
                "type": "object", "required": ["epoch", "loss", "val_accuracy"],
                "properties": {"epoch": _INT, "loss": {"type": "number"},
                               "val_accuracy": {"type": ["number", "null"]}}}},
        },
    },
    "eval": {
        "type": "object",
        "required": ["confusion_matrix", "total", "accuracy", "sensitivity", "ppv", "specificity"],
        "properties": {
            "confusion_matrix": {"type": "object", "required": ["tp", "fn", "fp", "tn"],
                                 "properties": {k: _INT for k in ("tp", "fn", "fp", "tn")}},
            "total": _INT, "accuracy": _PCT, "sensitivity": _PCT, "ppv": _PCT,
            "specificity": _PCT,
        },
    },
    "explain": {
        "type": "object", "required": ["rules", "pass_rate", "entries", "overlays"],
        "properties": {
            "pass_rate": {"type": "number", "minimum": 0, "maximum": 1},
            "rules": {"type": "object"},
            "overlays": {"type": "array", "items": {"type": "string"}},
            "entries": {"type": "array", "items": {
                "type": "object",
                "required": ["image_id", "peak", "border_mass", "top5_mass", "flags", "passed"],
                "properties": {"image_id": {"type": "string"},
                               "peak": {"type": "array", "items": _INT},
                               "border_mass": {"type": "number"},
                               "flags": {"type": "array", "items": {"type": "string"}},
                               "passed": {"type": "boolean"}}}},
        },
    },
    "search": {
        "type": "object",
        "required": ["baseline_accuracy", "evaluated", "archive", "generation_best", "pareto_ids"],
        "properties": {
            "baseline_accuracy": {"type": "number"}, "evaluated": _INT,
            "generation_best": {"type": "array", "items": {"type": ["number", "null"]}},
            "pareto_ids": {"type": "array", "items": _INT},
            "archive": {"type": "array", "items": {
                "type": "object", "required": ["id", "score", "accuracy", "params", "flops"],
                "properties": {"id": _INT, "score": {"type": "number"},
                               "accuracy": {"type": "number"}, "params": _INT, "flops": _INT}}},
        },
    },
}


def _emit_json(cfg: dict, payload: dict) -> bool:
    if cfg.get("json"):
        print(json.dumps(payload, indent=2))
        return True
    return False


# --------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: dict) -> int:
    m = D.ingest(cfg["manifest"], check_files=cfg["check_files"])
    split = D.partition(m, D.SplitConfig(cfg["seed"], cfg["val_fraction"], cfg["test_per_class"]))
    out = _out_dir(cfg, "prepare")
    D.write_split_csv(split, out / "split.csv")
    summary = {"records": len(split), "classes": split.class_counts(),
               "splits": split.split_counts(), "missing_files": len(m.missing),
               "split_csv": str(out / "split.csv")}
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    if _emit_json(cfg, summary):
        return EXIT_OK
    for s in D.SPLITS:
        c = summary["splits"][s]
        print(f"{s:<5} benign {c['benign']:>6}  malignant {c['malignant']:>6}")
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    specs = [_load_arch(a) for a in cfg["arch"]]
    size = cfg.get("input_size")
    reports = []
    for spec in specs:
        shape = (spec.input_shape[0], size, size) if size else None
        reports.append(A.analyze(spec, shape))
    table = None
    if cfg.get("compare"):
        if len(reports) < 2:
            raise UsageError("--compare needs at least two architectures")
        accs = cfg.get("accuracy")
        if accs is not None and len(accs) != len(reports):
            raise UsageError(f"{len(accs)} accuracies given for {len(reports)} architectures")
        table = A.compare(reports, accs)
    payload = {"reports": [r.to_dict() for r in reports]}
    if table is not None:
        payload["comparison"] = table.to_dict()
    if not _emit_json(cfg, payload):
        for r in reports:
            print(r.render())
            print()
        if table is not None:
            print(table.render())
    return EXIT_OK


def _split_source(path, split: str, size: int) -> D.ManifestDataset:
    m = D.ingest(path)
    if m.split is None:
        raise UsageError(f"{path} has no split column; run 'scanet prepare' first")
    if m.missing:
        raise UsageError(f"{len(m.missing)} image files listed in {path} are missing")
    src = D.ManifestDataset(m, split, size)
    if len(src) == 0:
        raise UsageError(f"split {split!r} is empty in {path}")
    return src


def cmd_train(cfg: dict) -> int:
    spec = _load_arch(cfg["arch"])
    size = cfg["image_size"] or spec.input_shape[1]
    shape = (spec.input_shape[0], size, size)
    train_src = _split_source(cfg["split"], "train", size)
    m = D.ingest(cfg["split"])
    val_src = D.ManifestDataset(m, "val", size) if len(m.indices("val")) else None
    net = A.build_network(spec, seed=cfg["seed"], input_shape=shape)
    tcfg = Tr.TrainConfig(learning_rate=cfg["lr"], epochs=cfg["epochs"], beta1=cfg["beta1"],
                          batch_size=cfg["batch_size"], seed=cfg["seed"],
                          rebalance=cfg["rebalance"], max_steps=cfg["max_steps"])
    aug = D.AugmentConfig(target_size=size) if cfg["augment"] else None
    out = _out_dir(cfg, "train")
    res = Tr.train(net, train_src, val_src, tcfg, aug)
    if size != spec.input_shape[1]:
        res.checkpoint.spec_text = A.serialize_archspec(
            A.ArchSpec(spec.name, shape, spec.layers, spec.num_classes))
    res.checkpoint.save(out / "checkpoint.bin")
    Tr.write_history_csv(res.history, out / "history.csv")
    payload = {"checkpoint": str(out / "checkpoint.bin"), "steps": res.steps,
               "best_epoch": res.checkpoint.epoch,
               "history": [{"epoch": h.epoch, "loss": h.loss, "val_accuracy": h.val_accuracy}
                           for h in res.history]}
    if _emit_json(cfg, payload):
        return EXIT_OK
    print(f"trained {res.steps} steps over {len(res.history)} epochs; "
          f"checkpoint epoch {res.checkpoint.epoch} -> {out / 'checkpoint.bin'}")
    return EXIT_OK


def _read_predictions(path) -> tuple:
    labels, preds = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"label", "prediction"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: header must contain 'label,prediction'")
        for row in reader:
            try:
                labels.append(D.LABELS[row["label"].strip().lower()])
                preds.append(D.LABELS[row["prediction"].strip().lower()])
            except KeyError:
                raise UsageError(f"{path}: unknown label in row {row}") from None
    return np.array(labels), np.array(preds)


def cmd_eval(cfg: dict) -> int:
    if cfg.get("predictions"):
        labels, preds = _read_predictions(cfg["predictions"])
        if len(labels) == 0:
            raise UsageError("empty test set")
        cm = Tr.ConfusionMatrix.from_predictions(labels, preds == 1)
    else:
        if not cfg.get("checkpoint") or not cfg.get("split"):
            raise UsageError("eval needs --checkpoint and --split, or --predictions")
        ck = Tr.Checkpoint.load(cfg["checkpoint"])
        net = ck.network()
        size = cfg["image_size"] or net.spec.input_shape[1]
        cm = Tr.evaluate(net, _split_source(cfg["split"], "test", size))
    rep = Tr.metrics(cm)
    out = _out_dir(cfg, "eval")
    payload = {"confusion_matrix": {"tp": cm.tp, "fn": cm.fn, "fp": cm.fp, "tn": cm.tn},
               "total": cm.total, "accuracy": rep.accuracy, "sensitivity": rep.sensitivity,
               "ppv": rep.ppv, "specificity": rep.specificity}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    (out / "metrics.txt").write_text(rep.line() + "\n", encoding="utf-8")
    if not _emit_json(cfg, payload):
        print(f"TP {cm.tp}  FN {cm.fn}  FP {cm.fp}  TN {cm.tn}  (n={cm.total})")
        print(rep.line())
    return EXIT_OK


def cmd_explain(cfg: dict) -> int:
    ck = Tr.Checkpoint.load(cfg["checkpoint"])
    net = ck.network()
    size = cfg["image_size"] or net.spec.input_shape[1]
    src = _split_source(cfg["split"], cfg.get("split_name") or "test", size)
    chosen = [i for i in range(len(src)) if src.labels[i] == cfg["target_class"]]
    chosen = (chosen or list(range(len(src))))[:cfg["limit"]]
    images = [src.load(i) for i in chosen]
    ids = [src.manifest.paths[i] for i in chosen]
    report, maps = E.audit(net, images, cfg["border_mass_max"], target_class=cfg["target_class"],
                           patch=cfg["patch"], stride=cfg["stride"], baseline=cfg["baseline"],
                           image_ids=ids)
    out = _out_dir(cfg, "explain")
    overlays = [str(E.overlay_export(im, sm, out / f"overlay_{k:03d}.png"))
                for k, (im, sm) in enumerate(zip(images, maps))]
    payload = dict(report.to_dict(), overlays=overlays)
    (out / "audit.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    if _emit_json(cfg, payload):
        return EXIT_OK
    print(f"audited {len(report.entries)} images, pass rate {100 * report.pass_rate:.1f}%")
    return EXIT_OK


BASELINE_ARCH = """input 3 32 32 name=baseline
conv stem out=8 k=3 s=2
residual r1 mid=4 out=16 s=2
head 2
"""


def cmd_search(cfg: dict) -> int:
    if cfg.get("space"):
        try:
            space = Se.SearchSpace.from_json(Path(cfg["space"]).read_text(encoding="utf-8"))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"bad search space {cfg['space']}: {exc}") from None
    else:
        space = Se.SearchSpace()
    tr, va = _search_data(cfg, space)
    proxy = Se.ProxyConfig(tr, va, cfg["train_steps"], cfg["batch_size"], cfg["lr"])
    if cfg.get("baseline_accuracy") is not None:
        base_acc = float(cfg["baseline_accuracy"])
    else:
        base_spec = (_load_arch(cfg["baseline_arch"]) if cfg.get("baseline_arch")
                     else A.parse_archspec(BASELINE_ARCH))
        base_acc = Se.proxy_accuracy(base_spec, proxy, seed=cfg["seed"])
    constraint = Se.Constraint(base_acc)
    result = Se.search(space, constraint, cfg["budget"], proxy, seed=cfg["seed"],
                       population=cfg["population"])
    out = _out_dir(cfg, "search")
    Se.save_archive(result, out / "archive")
    table = Se.tradeoff_report(result.archive) if result.archive else None
    payload = {"baseline_accuracy": base_acc, "evaluated": len(result.evaluated),
               "generation_best": result.generation_best,
               "pareto_ids": table.front_ids if table else [],
               "archive": [{"id": c.id, "score": c.score, "accuracy": c.val_accuracy,
                            "params": c.params, "flops": c.flops, "parent_id": c.parent_id,
                            "mutation": c.mutation} for c in result.archive]}
    (out / "search.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    if table is not None:
        (out / "tradeoff.txt").write_text(table.render() + "\n", encoding="utf-8")
    if _emit_json(cfg, payload):
        return EXIT_OK
    print(f"baseline proxy accuracy {100 * base_acc:.1f}%; evaluated {len(result.evaluated)}, "
          f"archived {len(result.archive)}")
    if table is not None:
        print(table.render())
    else:
        print("archive is empty: no candidate beat the baseline")
    return EXIT_OK


def _search_data(cfg, space):
    from .synthetic import search_task

    if cfg.get("split"):
        size = space.input_shape[1]
        m = D.ingest(cfg["split"])
        tr = D.ArrayDataset(D.load_all(D.ManifestDataset(m, "train", size)), m.subset("train").labels)
        va = D.ArrayDataset(D.load_all(D.ManifestDataset(m, "val", size)), m.subset("val").labels)
        return tr, va
    if space.input_shape[1] != space.input_shape[2]:
        raise UsageError("synthetic search data needs a square input shape")
    return search_task(cfg["synthetic_size"], space.input_shape[1], seed=cfg["seed"])


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--json", action="store_true", default=None,
                        help="print a machine-readable result (see SCHEMAS)")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("prepare", help="partition a manifest into train/val/test")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--test-per-class", type=int)
    sp.add_argument("--val-fraction", type=float)
    sp.add_argument("--no-check-files", dest="check_files", action="store_false", default=None)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("analyze", help="parameter and FLOP report")
    common(sp)
    sp.add_argument("arch", nargs="+", help="architecture files (or builtin:resnet50)")
    sp.add_argument("--input-size", type=int)
    sp.add_argument("--compare", action="store_true", default=None)
    sp.add_argument("--accuracy", type=float, nargs="+", help="accuracy in [0,1] per arch")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("train", help="train with Adam and batch rebalancing")
    common(sp)
    sp.add_argument("--arch", required=True)
    sp.add_argument("--split", required=True, help="split CSV from 'prepare'")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--beta1", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    sp.add_argument("--no-rebalance", dest="rebalance", action="store_false", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="confusion matrix, accuracy, sensitivity, PPV")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split")
    sp.add_argument("--predictions", help="CSV with label,prediction columns")
    sp.add_argument("--image-size", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("explain", help="occlusion saliency overlays and audit")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--split-name", choices=D.SPLITS)
    sp.add_argument("--patch", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--baseline", choices=("mean", "edge"))
    sp.add_argument("--border-mass-max", type=float)
    sp.add_argument("--target-class", type=int)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--image-size", type=int)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("search", help="constrained architecture search")
    common(sp)
    sp.add_argument("--space", help="search space JSON")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--population", type=int)
    sp.add_argument("--train-steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--split", help="split CSV; synthetic task when omitted")
    sp.add_argument("--synthetic-size", type=int)
    sp.add_argument("--baseline-accuracy", type=float)
    sp.add_argument("--baseline-arch")
    sp.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _merge_config(args, args.command)
        np.random.seed(cfg.get("seed", 0) or 0)
        return args.func(cfg)
    except (UsageError, A.ArchSpecError, D.DataError, Se.SearchError) as exc:
        print(f"scanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Tr.TrainingDiverged, OSError, ValueError) as exc:
        print(f"scanet {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
