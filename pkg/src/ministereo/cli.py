"""Command-line surface: dataset generation, training, inference, evaluation,
MACs profiling, and gradient checking.

Exit codes: 0 success, 2 usage error, 3 missing file, 4 config error,
5 bad data/weight file, 1 anything else.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import (ConfigError, NetworkConfig, PRESETS, SceneSpec, StageConfig,
                     network_config_from, parse_config_file, scene_spec_from,
                     stage_config_from)
from .data import gen_synthetic_dataset, load_dataset, save_dataset
from .metrics import EmptyMaskError, MetricReport, report, write_metrics_csv
from .network import NetParams, forward, forward_vars, init_weights, profile_macs
from .pfm import PfmError, read_pfm, write_pfm
from .png_io import read_png
from .training import (SyntheticOracle, disparity_loss, run_stage1, run_stage2,
                       run_stage3)
from .weights_io import (CorruptWeightFileError, WeightFormatError, load_weights,
                         save_weights)

_KNOWN_SECTIONS = {"network", "stage1", "stage2", "stage3", "data"}


def _read_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    sections = parse_config_file(p)
    unknown = set(sections) - _KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return sections


def _net_config(arg: str) -> NetworkConfig:
    if arg in PRESETS:
        return PRESETS[arg]()
    return network_config_from(_read_config(arg))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_gen_data(args) -> int:
    sections = _read_config(args.spec)
    spec = scene_spec_from(sections)
    samples = gen_synthetic_dataset(spec)
    save_dataset(args.out_dir, samples)
    print(f"wrote {len(samples)} pairs to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    sections = _read_config(args.config)
    net_cfg = network_config_from(sections)
    stage_cfg = stage_config_from(sections, args.stage)
    if args.data:
        data = load_dataset(_require_file(args.data, "dataset directory"))
    else:
        data = gen_synthetic_dataset(scene_spec_from(sections))
    init = None
    if args.init:
        init = load_weights(_require_file(args.init, "weight file"), net_cfg)
    eval_set = None
    if args.eval_data:
        eval_set = load_dataset(_require_file(args.eval_data, "eval dataset directory"))

    if args.stage == 1:
        weights, log = run_stage1(data, stage_cfg, net_cfg, init=init, eval_set=eval_set)
    elif args.stage == 2:
        if init is None:
            raise ConfigError("stage 2 needs --init weights from stage 1")
        weights, log = run_stage2(data, init, stage_cfg, net_cfg, eval_set=eval_set)
    else:
        if init is None:
            raise ConfigError("stage 3 needs --init weights from an earlier stage")
        oracle = SyntheticOracle(stage_cfg.oracle_noise_sigma, seed=stage_cfg.seed)
        weights, log = run_stage3(data, oracle, init, stage_cfg, net_cfg, eval_set=eval_set)

    save_weights(args.out, weights)
    if args.log:
        log.save_jsonl(args.log)
    last = log.steps[-1]
    print(f"stage {args.stage}: {stage_cfg.steps} steps, final loss {last['loss']:.4f}, "
          f"weights -> {args.out}")
    if log.evals:
        ev = log.evals[-1]
        print(f"eval: epe {ev['epe']:.3f} d1 {ev['d1']:.2f}%")
    return 0


def cmd_infer(args) -> int:
    net_cfg = _net_config(args.config)
    weights = load_weights(_require_file(args.weights, "weight file"), net_cfg)
    left = read_png(_require_file(args.left, "left image"))
    right = read_png(_require_file(args.right, "right image"))
    result = forward(left, right, weights, net_cfg)
    write_pfm(args.out, result.disparity.values)
    print(f"wrote disparity {result.disparity.values.shape} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = _require_file(args.pred_dir, "prediction directory")
    gt_dir = _require_file(args.gt_dir, "ground-truth directory")
    names = sorted(p.name for p in pred_dir.glob("*.pfm"))
    if not names:
        raise FileNotFoundError(f"no .pfm predictions under {pred_dir}")
    rows: list[tuple[str, MetricReport, int | None]] = []
    preds, gts, masks = [], [], []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise FileNotFoundError(f"ground truth missing for {name}: {gt_path}")
        pred = read_pfm(pred_dir / name)
        gt = read_pfm(gt_path)
        valid = np.isfinite(gt)
        gt = np.where(valid, gt, 0.0)
        rows.append((name, report(pred, gt, valid), None))
        preds.append(pred)
        gts.append(gt)
        masks.append(valid)
    pooled = report(np.stack(preds), np.stack(gts), np.stack(masks))
    rows.append(("all", pooled, None))
    write_metrics_csv(args.report, rows)
    print(f"{len(names)} maps: epe {pooled.epe:.4f} d1 {pooled.d1:.3f}% "
          f"-> {args.report}")
    return 0


def cmd_macs(args) -> int:
    net_cfg = _net_config(args.config)
    h = -(-args.height // 32) * 32
    w = -(-args.width // 32) * 32
    if (h, w) != (args.height, args.width):
        print(f"note: padding {args.width}x{args.height} up to {w}x{h} "
              f"(extents must be divisible by 32)")
    prof = profile_macs(net_cfg, h, w)
    print(f"input {w}x{h}, d_max {net_cfg.d_max}, variant {net_cfg.agg_variant}")
    for group, macs in sorted(prof.by_group.items()):
        print(f"  {group:12s} {macs / 1e9:10.4f} G")
    print(f"  {'total':12s} {prof.total / 1e9:10.4f} G")
    print(f"  3D share of aggregation: {100 * prof.three_d_fraction:.1f}%")
    return 0


def cmd_gradcheck(args) -> int:
    net_cfg = _net_config(args.config)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed)))
    left = rng.random((3, 32, 64)).astype(np.float32)
    right = rng.random((3, 32, 64)).astype(np.float32)
    gt = (rng.random((32, 64)) * net_cfg.d_max / 4).astype(np.float32)
    mask = np.ones((32, 64), dtype=bool)
    weights = init_weights(net_cfg, args.seed)

    def loss_fn(view):
        out = forward_vars(ad.lift(left), ad.lift(right), NetParams.run(view), net_cfg)
        return disparity_loss(out["disparity"], gt, mask)

    rep = ad.finite_diff_check(loss_fn, weights, eps=1e-3, n_coords=args.samples,
                               seed=args.seed)
    print(rep)
    ok = rep.max_rel_error < args.tolerance
    print("PASS" if ok else "FAIL", f"(tolerance {args.tolerance:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ministereo",
                                     description="desk-scale stereo disparity toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic stereo dataset")
    p.add_argument("spec", help="config file with a [data] section")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--config", required=True, help="config file")
    p.add_argument("--init", help="initial weights (required for stages 2 and 3)")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--data", help="dataset directory (defaults to generating from [data])")
    p.add_argument("--eval-data", help="held-out dataset directory for periodic eval")
    p.add_argument("--log", help="write the train log as JSON lines")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict a disparity map for one pair")
    p.add_argument("--weights", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True, help="output PFM path")
    p.add_argument("--config", default="micro", help="preset name or config file")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predicted PFMs against ground truth")
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--gt-dir", required=True, type=Path)
    p.add_argument("--report", required=True, help="output CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("macs", help="analytic multiply-accumulate profile")
    p.add_argument("--config", default="micro", help="preset name or config file")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.set_defaults(fn=cmd_macs)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    p.add_argument("--config", default="micro", help="preset name or config file")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-2)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except (PfmError, WeightFormatError, CorruptWeightFileError, EmptyMaskError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 5
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
