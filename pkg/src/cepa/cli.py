"""Command line driver: train | detect | verify | figures | all.

Every subcommand reads one INI config (see ``cepa.config``) and works inside
a single output directory with fixed file names::

    config.ini            effective configuration
    model.ckpt            trained weights
    train.csv, train.json per-epoch trace and training summary
    detect/<layer>_<target>.csv   per-run CEPA trace
    detect/<layer>_<target>.json  per-run summary (includes mu)
    detect/stats.csv      one row per (layer, target)
    report.json           detection report
    table1.csv            attack success rates (rows GT, (1), (3))
    verify.json           verification details
    figs/*.svg            two bar charts per scanned layer
    figs/cossim/*.svg     cosine-similarity charts

Exit codes: 0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import config as config_mod
from .attacks import attack_success_rate, correctly_classified_sources, poison
from .core import NumericalFailure, scan
from .data import read_cifar10, sample_defense_set, synth_shapes
from .infer import DetectionReport, decide, mad_anomaly_indices
from .model import desk_cnn, load_checkpoint, save_checkpoint
from .plotting import cosine_charts, layer_charts
from .trainer import TrainingDiverged, train
from .verify import table1_protocol, tensor_bytes

log = logging.getLogger("cepa")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    pass


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, np.integer):
        return int(v)
    return v


def _dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _write_all(out, files):
    """Single writer: every file goes to a temporary name first, then is renamed."""
    for rel, text in files.items():
        path = os.path.join(out, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        mode = "wb" if isinstance(text, bytes) else "w"
        with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(text)
        os.replace(tmp, path)


def _dataset(cfg):
    d = cfg.dataset
    if d.kind == "cifar10":
        try:
            return read_cifar10(d.path)
        except FileNotFoundError as exc:
            raise UserError(str(exc)) from exc
    return synth_shapes(d.num_classes, d.per_class_train, d.per_class_test, d.size, cfg.seed,
                        jitter=d.jitter, noise=d.noise, shift=d.shift, contrast=d.contrast,
                        background=d.background)


def _model(cfg, ds, init=True):
    return desk_cnn(ds.num_classes, ds.input_shape, seed=cfg.seed if init else None)


def _load_model(cfg, ds):
    path = os.path.join(cfg.out, "model.ckpt")
    if not os.path.exists(path):
        raise UserError(f"no checkpoint at {path}; run 'train' first")
    model = _model(cfg, ds, init=False)
    try:
        load_checkpoint(path, model)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    return model


def cmd_train(cfg):
    ds = _dataset(cfg)
    spec = cfg.attack_spec
    data = ds if spec is None else poison(ds, spec).dataset
    model = _model(cfg, ds)
    result = train(model, data, cfg.train_config)
    info = {"test_acc": result.trace[-1]["test_acc"] if result.trace else None,
            "attack": cfg.attack.kind, "asr_ground_truth": None}
    if spec is not None:
        src = correctly_classified_sources(model, ds.test, spec, seed=cfg.seed)
        info["asr_ground_truth"] = attack_success_rate(model, spec, src.images) if len(src) else None
        info["target_class"] = spec.target_class
    log.info("train: test accuracy %.4f, ground-truth ASR %s", info["test_acc"], info["asr_ground_truth"])
    os.makedirs(cfg.out, exist_ok=True)
    save_checkpoint(model, os.path.join(cfg.out, "model.ckpt.tmp"))
    os.replace(os.path.join(cfg.out, "model.ckpt.tmp"), os.path.join(cfg.out, "model.ckpt"))
    rows = [(r["epoch"], r["lr"], r["train_loss"], r["test_acc"]) for r in result.trace]
    _write_all(cfg.out, {
        "config.ini": config_mod.dump(cfg),
        "train.csv": _csv_text(["epoch", "lr", "train_loss", "test_acc"], rows),
        "train.json": _dumps(info),
    })
    return info


def _separation(tables, direction):
    """Largest MAD index per layer for a per-class statistic {layer: {class: value}}."""
    return {layer: max(mad_anomaly_indices([vals[t] for t in sorted(vals)], direction)[0])
            for layer, vals in tables.items()}


def cmd_detect(cfg):
    ds = _dataset(cfg)
    model = _load_model(cfg, ds)
    defense, _ = sample_defense_set(ds, cfg.defense.per_class, cfg.seed)
    runs = scan(model, defense, cfg.defense.cepa(), threads=cfg.threads)
    report = decide(runs, cfg.defense.threshold)
    log.info("detect: verdict %s, targets %s", report.verdict, report.detected_targets)

    files = {"config.ini": config_mod.dump(cfg)}
    stats = []
    cos = {}
    for layer, per_t in sorted(runs.items()):
        tab = report.tables[layer]
        for t, run in sorted(per_t.items()):
            rows = [(e["iteration"], e["objective"], e["misclass_rate"], e["lambda"], e["mean_delta_norm"])
                    for e in run.trace]
            files[f"detect/{layer}_{t}.csv"] = _csv_text(
                ["iteration", "objective", "misclass_rate", "lambda", "mean_delta_norm"], rows)
            summary = run.summary()
            summary["mu"] = run.mu.astype(np.float64)
            files[f"detect/{layer}_{t}.json"] = _dumps(summary)
            cos.setdefault(layer, {})[t] = summary["cos_sim"]
            stats.append((layer, t, run.iterations, run.converged, run.degenerate, run.misclass,
                          tab.consensus[t], tab.mu_norm[t], tab.idx_consensus[t], tab.idx_mu[t],
                          summary["cos_sim"]))
    files["detect/stats.csv"] = _csv_text(
        ["layer", "target", "iterations", "converged", "degenerate", "misclass_rate", "consensus", "mu_norm",
         "idx_consensus", "idx_mu", "cos_sim"], stats)
    files["report.json"] = report.to_json()
    sep_c = _separation({l: tab.consensus for l, tab in report.tables.items()}, "low")
    sep_cos = _separation(cos, "high")
    for layer in sorted(sep_c):
        log.info("layer %d: max consensus index %.3f, max cosine-similarity index %.3f",
                 layer, sep_c[layer], sep_cos[layer])
    _write_all(cfg.out, files)
    cmd_figures(cfg)
    return report


def _read_report(out):
    path = os.path.join(out, "report.json")
    if not os.path.exists(path):
        raise UserError(f"no detection report at {path}; run 'detect' first")
    with open(path, encoding="utf-8") as fh:
        return DetectionReport.from_json(fh.read())


def _read_summary(out, layer, target):
    path = os.path.join(out, "detect", f"{layer}_{target}.json")
    if not os.path.exists(path):
        raise UserError(f"missing run summary {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_verify(cfg):
    report = _read_report(cfg.out)
    if not report.detected:
        raise UserError("report verdict is clean: no detected target to verify")
    ds = _dataset(cfg)
    model = _load_model(cfg, ds)
    defense, _ = sample_defense_set(ds, cfg.defense.per_class, cfg.seed)
    runs = {(layer, t): _read_summary(cfg.out, layer, t) for t, layer in report.detected.items()}
    spec = cfg.attack_spec
    results = table1_protocol(model, report, ds.test, defense, runs, spec, cfg.verify, cfg.seed)
    name = cfg.attack.kind if cfg.attack.kind != "none" else "unknown"
    cols = [name if len(results) == 1 else f"{name}/t{r.target}" for r in results]
    rows = [
        ["GT"] + [r.asr_ground_truth if r.asr_ground_truth is not None else "" for r in results],
        ["(1)"] + [r.asr_objective for r in results],
        ["(3)"] + [r.asr_resynthesized for r in results],
    ]
    files = {
        "table1.csv": _csv_text(["row"] + cols, rows),
        "verify.json": _dumps({"results": [r.to_dict() for r in results], "attack": cfg.attack.kind}),
    }
    if cfg.verify.dump_deltas:
        for r in results:
            files[f"verify/deltas_t{r.target}.bin"] = tensor_bytes(r.deltas)
    for r in results:
        log.info("verify: target %d layer %d ASR GT %s, objective %.4f, re-synthesized %.4f",
                 r.target, r.layer, r.asr_ground_truth, r.asr_objective, r.asr_resynthesized)
    _write_all(cfg.out, files)
    return results


def cmd_figures(cfg):
    report = _read_report(cfg.out)
    summaries = sorted(glob.glob(os.path.join(cfg.out, "detect", "*_*.json")))
    if not summaries:
        raise UserError(f"no run summaries under {os.path.join(cfg.out, 'detect')}")
    cos = {}
    for path in summaries:
        with open(path, encoding="utf-8") as fh:
            s = json.load(fh)
        cos.setdefault(int(s["layer"]), {})[int(s["target"])] = float(s["cos_sim"])
    fig_dir = os.path.join(cfg.out, "figs")
    paths = layer_charts(report, fig_dir)
    paths += cosine_charts(cos, os.path.join(fig_dir, "cossim"), report.detected_targets)
    return paths


def cmd_all(cfg):
    cmd_train(cfg)
    report = cmd_detect(cfg)
    if report.detected:
        cmd_verify(cfg)
    else:
        log.info("verify skipped: verdict clean")
    return report


COMMANDS = {"train": cmd_train, "detect": cmd_detect, "verify": cmd_verify, "figures": cmd_figures, "all": cmd_all}


def build_parser():
    p = argparse.ArgumentParser(prog="cepa", description="Consensus embedded-perturbation backdoor detection.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI experiment config")
    p.add_argument("--seed", type=int, help="override [experiment] seed")
    p.add_argument("--out", help="override [experiment] out")
    p.add_argument("--threads", type=int, help="override [experiment] threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_mod.load(args.config).with_overrides(args.seed, args.out, args.threads)
        COMMANDS[args.command](cfg)
    except (config_mod.ConfigError, UserError, FileNotFoundError) as exc:
        print(f"cepa: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericalFailure, TrainingDiverged, FloatingPointError) as exc:
        print(f"cepa: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cepa: error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
