"""Command-line entry point for reproducible runs.

Every subcommand resolves one config (built-in defaults, then the config
file, then --set overrides, then explicit flags), writes the resolved
snapshot plus seed fingerprint under the output directory, and exits with a
structured code: 0 ok, 2 config, 3 data, 4 numeric, 5 contract.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

import occludrop.config as cfgmod
from .train import (
    ablation_suite,
    ablation_variant,
    evaluate_model,
    load_dataset,
    load_model,
    mse_compensation_experiment,
    place_sweep,
    resolve_gamma_policy,
    train,
)
from .data import generate_synthetic, save_png_tree
from .errors import ConfigError, OccludropError
from .gradcheck import run_primitive_gradient_suite
from .spatial_reg import ResponseSet, channel_response_heatmap, write_heatmap_pgm
from .tensor import Tensor

log = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="flat key=value config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="config override (repeatable), e.g. --set train.alpha=100",
    )
    parser.add_argument("--out", type=str, default="runs/out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="master seed (derives data/init/dropout)")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force 64-bit precision and single-threaded data preparation",
    )
    parser.add_argument("--precision", type=int, choices=(32, 64), default=None)


def _resolve_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config, args.set)
    if args.seed is not None:
        children = np.random.SeedSequence(args.seed).spawn(3)
        data, init, dropout = (int(c.generate_state(1)[0]) for c in children)
        cfg = cfg.with_values(**{"seed.data": data, "seed.init": init, "seed.dropout": dropout})
    if args.deterministic:
        os.environ["OCCLUDROP_THREADS"] = "1"
        cfg = cfg.with_values(**{"train.precision": 64})
    if args.precision is not None:
        cfg = cfg.with_values(**{"train.precision": args.precision})
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    record = train(cfg, args.out)
    print(f"run complete: {record.run_dir}")
    print(f"  final total loss {record.steps[-1].loss_total:.6f}")
    for key, value in sorted(record.metrics.items()):
        print(f"  {key} = {value:.4f}")
    print(f"  parameters {record.parameter_count} (attention module: {record.sam_parameter_count})")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model, _ = load_model(cfg, args.checkpoint)
    dataset = load_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.cfg").write_text(cfg.snapshot_text(), encoding="ascii")
    rows, values = evaluate_model(model, dataset, cfg)
    from .metrics import write_metrics_csv

    write_metrics_csv(out / "metrics.csv", rows)
    for key, value in sorted(values.items()):
        print(f"{key} = {value:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    table, _ = ablation_suite(cfg, args.out, seeds=args.seeds)
    print(f"{'variant':12s} {'occluded':>9s} {'clean':>9s}")
    for row in table:
        print(f"{row['variant']:12s} {row['occluded_rank1']:9.4f} {row['clean_rank1']:9.4f}")
    print(f"table: {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_place_sweep(args) -> int:
    cfg = _resolve_config(args)
    stages = tuple(int(s) for s in args.stages.split(","))
    rows = place_sweep(cfg, args.out, stages=stages)
    print(f"{'stage':>5s} {'occluded':>9s} {'clean':>9s}")
    for row in rows:
        print(f"{row['stage']:5d} {row['occluded_rank1']:9.4f} {row['clean_rank1']:9.4f}")
    return 0


def cmd_mse_exp(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    dataset = load_dataset(cfg)
    baseline_cfg = ablation_variant(cfg, "baseline")
    base_rec = train(baseline_cfg, out / "baseline", dataset=dataset)
    lcd_rec = train(cfg, out / "lcd", dataset=dataset)
    policy = resolve_gamma_policy(cfg, base_rec.model.stage_channels(3))
    mses = mse_compensation_experiment(
        {"baseline": base_rec.model, "lcd": lcd_rec.model},
        dataset,
        policy,
        seed=cfg.seed.data,
    )
    fp = cfg.seed_fingerprint()
    with open(out / "mse.csv", "w", encoding="ascii") as fh:
        fh.write("model,mean_mse,seed_fingerprint\n")
        for name, value in mses.items():
            fh.write(f"{name},{value!r},{fp}\n")
    for name, value in mses.items():
        print(f"{name}: mean embedding mse {value:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_primitive_gradient_suite(seeds=args.seeds)
    failed = 0
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name:28s} max rel err {result.max_rel_error:.3e}")
        failed += 0 if result.passed else 1
    if failed:
        print(f"{failed} primitive(s) failed the gradient check", file=sys.stderr)
        return 4
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    dataset = generate_synthetic(
        cfg.data.num_ids, cfg.data.images_per_id, cfg.data.image_size, cfg.seed.data
    )
    save_png_tree(dataset, args.out)
    print(f"wrote {len(dataset.images)} images for {dataset.num_ids} identities to {args.out}")
    return 0


def cmd_heatmaps(args) -> int:
    cfg = _resolve_config(args)
    model, _ = load_model(cfg, args.checkpoint)
    dataset = load_dataset(cfg)
    test_x, _ = dataset.test_split()
    _, trace = model.forward(Tensor(test_x[:64]), training=False)
    rset = ResponseSet(trace.responses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layer = f"stage{model.reg_stage}.conv2"
    c = trace.responses.shape[1]
    maps = []
    for channel in range(c):
        heat = channel_response_heatmap(rset, channel)
        maps.append(heat.reshape(-1))
        write_heatmap_pgm(out / f"{layer}_{channel}.pgm", heat)
    corr = np.corrcoef(np.stack(maps))
    off = corr[~np.eye(c, dtype=bool)]
    print(f"wrote {c} heatmaps to {out}")
    print(f"mean pairwise map correlation: {np.nanmean(off):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occludrop",
        description="Channel-dropout occlusion simulation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training experiment")
    _add_common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test splits")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-component ablation")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=1, help="repetitions per variant")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("place-sweep", help="sweep the insertion stage")
    _add_common(p)
    p.add_argument("--stages", type=str, default="2,3,4")
    p.set_defaults(handler=cmd_place_sweep)

    p = sub.add_parser("mse-exp", help="feature-compensation MSE experiment")
    _add_common(p)
    p.set_defaults(handler=cmd_mse_exp)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as PNGs")
    _add_common(p)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("heatmaps", help="export per-channel response heatmaps")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=cmd_heatmaps)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except OccludropError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected failure
        log.exception("unexpected failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
