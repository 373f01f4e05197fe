"""Command-line surface: train, eval, ablate, visualize, flops.

Exit codes: 0 success, 2 usage/config error, 3 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import synthdata
from .config import ExperimentConfig, default_config, load_config
from .errors import ConfigError, DatasetFormatError, NumericalError
from .heads import count_macs
from .params import load_checkpoint, save_checkpoint
from .rng import mix64
from .traineval import (APReport, IOU_THRESHOLDS, ap_curve_export, build_model,
                        evaluate, train)

ABLATION_ROWS = {
    "fusion": [
        ("none", {"head.variant": "bmask", "head.m2b_fusion": "false",
                  "head.b2m_fusion": "false"}),
        ("m2b", {"head.variant": "bmask", "head.m2b_fusion": "true",
                 "head.b2m_fusion": "false"}),
        ("b2m", {"head.variant": "bmask", "head.m2b_fusion": "false",
                 "head.b2m_fusion": "true"}),
        ("both", {"head.variant": "bmask", "head.m2b_fusion": "true",
                  "head.b2m_fusion": "true"}),
    ],
    "loss": [
        ("bce", {"head.variant": "bmask", "head.loss.kind": "bce"}),
        ("weighted_bce", {"head.variant": "bmask",
                          "head.loss.kind": "weighted_bce"}),
        ("dice", {"head.variant": "bmask", "head.loss.kind": "dice"}),
        ("dice_bce", {"head.variant": "bmask", "head.loss.kind": "dice_bce"}),
    ],
    "target": [
        ("none", {"head.variant": "bmask", "head.loss.target": "none"}),
        ("mask", {"head.variant": "bmask", "head.loss.target": "mask"}),
        ("boundary", {"head.variant": "bmask", "head.loss.target": "boundary"}),
    ],
    "roi": [
        ("p2p5_14", {"head.variant": "bmask", "head.boundary_source": "same",
                     "head.boundary_roi_size": "14"}),
        ("p2_14", {"head.variant": "bmask", "head.boundary_source": "p2",
                   "head.boundary_roi_size": "14"}),
        ("p2p5_28", {"head.variant": "bmask", "head.boundary_source": "same",
                     "head.boundary_roi_size": "28"}),
        ("p2_28", {"head.variant": "bmask", "head.boundary_source": "p2",
                   "head.boundary_roi_size": "28"}),
    ],
    "compute": [
        ("plain", {"head.variant": "plain"}),
        ("lmh", {"head.variant": "lmh"}),
        ("bmask", {"head.variant": "bmask"}),
    ],
}


def _out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg["output.dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(cfg: ExperimentConfig, out: Path):
    (out / "effective.cfg").write_text(cfg.echo_text())


def _dataset(cfg: ExperimentConfig, split: str):
    file_key = cfg[f"dataset.file_{split}"]
    if file_key:
        return synthdata.load(file_key)
    data = synthdata.generate(cfg.dataset_spec(split))
    save_key = cfg[f"dataset.save_{split}"]
    if save_key:
        synthdata.save(data, save_key)
    return data


def _write_loss_csv(history, path: Path):
    lines = ["iteration,lr,mask_loss,boundary_loss,total"]
    for it, lr, rep in history:
        lines.append(f"{it},{lr:.10g},{rep.mask_loss:.10g},"
                     f"{rep.boundary_loss:.10g},{rep.total:.10g}")
    path.write_text("\n".join(lines) + "\n")


def _write_ap_csv(report: APReport, path: Path):
    lines = ["threshold,ap"]
    for t_pct in IOU_THRESHOLDS:
        lines.append(f"{t_pct / 100:.2f},{report.ap_per_threshold[t_pct / 100]:.6f}")
    path.write_text("\n".join(lines) + "\n")


def _write_report_json(report: APReport, path: Path):
    payload = {
        "ap": report.ap,
        "ap50": report.ap50,
        "ap75": report.ap75,
        "ap_per_threshold": {f"{t / 100:.2f}": report.ap_per_threshold[t / 100]
                             for t in IOU_THRESHOLDS},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _train_once(cfg: ExperimentConfig, train_data, out: Path):
    model, history = train(cfg.backbone_cfg(), cfg.head_cfg(), cfg.train_cfg(),
                           train_data)
    save_checkpoint(model.params, out / "checkpoint.bmlab")
    _write_loss_csv(history, out / "loss.csv")
    return model


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    train_data = _dataset(cfg, "train")
    _train_once(cfg, train_data, out)
    print(f"trained {cfg['head.variant']} head for "
          f"{cfg['train.iterations']} iterations -> {out / 'checkpoint.bmlab'}")
    return 0


def _load_model(cfg: ExperimentConfig, out: Path):
    model = build_model(cfg.backbone_cfg(), cfg.head_cfg())
    ckpt = cfg["eval.checkpoint"] or str(out / "checkpoint.bmlab")
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    load_checkpoint(model.params, ckpt)
    return model


def cmd_eval(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    model = _load_model(cfg, out)
    report = evaluate(model, _dataset(cfg, "val"))
    _write_ap_csv(report, out / "ap.csv")
    _write_report_json(report, out / "report.json")
    print(f"AP {report.ap:.4f}  AP50 {report.ap50:.4f}  AP75 {report.ap75:.4f}")
    return 0


def cmd_flops(cfg: ExperimentConfig) -> int:
    total, layers = count_macs(cfg.head_cfg())
    for name, macs in layers:
        print(f"{name:14s} {macs}")
    print(f"{'total':14s} {total}")
    return 0


def cmd_visualize(cfg: ExperimentConfig) -> int:
    from .visualize import save_overlays
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    model = _load_model(cfg, out)
    val = _dataset(cfg, "val")
    n = cfg["visualize.count"]
    if n > len(val):
        raise ConfigError(f"visualize.count={n} exceeds dataset size {len(val)}")
    paths = save_overlays(model, val, n, out)
    print(f"wrote {len(paths)} overlays to {out}")
    return 0


def _median_report(reports) -> APReport:
    per = {}
    for t_pct in IOU_THRESHOLDS:
        t = t_pct / 100.0
        per[t] = float(np.median([r.ap_per_threshold[t] for r in reports]))
    return APReport.from_thresholds(per)


def cmd_ablate(cfg: ExperimentConfig) -> int:
    matrix = cfg["ablate.matrix"]
    rows = ABLATION_ROWS[matrix]
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    train_data = _dataset(cfg, "train")
    val_data = _dataset(cfg, "val")
    n_seeds = cfg["ablate.seeds"]
    base_seed = cfg.seed

    medians = {}
    for row_id, overrides in rows:
        reports = []
        for k in range(n_seeds):
            run_cfg = cfg.with_overrides(dict(
                overrides, **{"seed": str(mix64(base_seed, k))}))
            run_dir = out / matrix / row_id / f"seed{k}"
            run_dir.mkdir(parents=True, exist_ok=True)
            model = _train_once(run_cfg, train_data, run_dir)
            report = evaluate(model, val_data)
            _write_ap_csv(report, run_dir / "ap.csv")
            reports.append(report)
        medians[row_id] = _median_report(reports)

    lines = ["variant,ap,ap50,ap75" + (",macs" if matrix == "compute" else "")]
    for row_id, overrides in rows:
        rep = medians[row_id]
        line = f"{row_id},{rep.ap:.6f},{rep.ap50:.6f},{rep.ap75:.6f}"
        if matrix == "compute":
            row_cfg = cfg.with_overrides(dict(overrides))
            line += f",{count_macs(row_cfg.head_cfg())[0]}"
        lines.append(line)
    table = out / f"{matrix}_ablation.csv"
    table.write_text("\n".join(lines) + "\n")
    ap_curve_export(medians, out / "ap_curve.csv", out / "ap_curve.svg")
    print(f"ablation table -> {table}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
    "flops": cmd_flops,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bmasklab",
        description="Boundary-preserving mask head laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="global seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        cfg = load_config(args.config) if args.config else default_config()
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            overrides[key.strip()] = raw
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out is not None:
            overrides["output.dir"] = args.out
        cfg = cfg.with_overrides(overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
