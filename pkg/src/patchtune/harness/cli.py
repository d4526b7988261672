"""Command-line entry point: ``patchtune <gen|audit|pretrain|finetune|matrix|selftest>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..bench import audit, generate, load_datasets, mask_non_rare, save_datasets
from ..errors import PatchTuneError
from ..io import atomic_write_text
from ..nets import load_checkpoint, save_checkpoint
from .config import METHODS, TrainConfig, apply_overrides, load_config
from .train import (MetricsRecord, bench_for_seed, finetune, pretrain, run_matrix,
                    write_metrics)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "method", None):
        updates["method"] = args.method
    if updates:
        cfg = cfg.with_updates(**updates)
    return apply_overrides(cfg, args.set)


def _datasets(args, cfg):
    if getattr(args, "data", None):
        splits, _ = load_datasets(args.data)
        return splits
    return generate(bench_for_seed(cfg))


def cmd_gen(args) -> int:
    cfg = _config(args)
    bench = bench_for_seed(cfg)
    path = save_datasets(Path(args.out) / "datasets.npz", generate(bench), bench)
    print(path)
    return 0


def cmd_audit(args) -> int:
    cfg = _config(args)
    if args.data:
        splits, bench = load_datasets(args.data)
    else:
        bench = bench_for_seed(cfg)
        splits = generate(bench)
    report = audit(splits, bench)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(Path(args.out) / "audit.json", text)
    print(text)
    return 0 if report["ok"] else 1


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    pre, _, _ = _datasets(args, cfg)
    record = MetricsRecord("pretrain", cfg.seed)
    model = pretrain(cfg, pre, record)
    out = Path(args.out)
    save_checkpoint(out / "pretrain.npz", model, {"seed": cfg.seed, "config": cfg.to_dict()})
    write_metrics(out, [record], name="pretrain_metrics")
    print(out / "pretrain.npz")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    pre, tr, te = _datasets(args, cfg)
    ckpt = None
    if cfg.method != "scratch":
        if args.checkpoint:
            ckpt, _ = load_checkpoint(args.checkpoint)
        else:
            ckpt = pretrain(cfg, pre)
    model, record = finetune(cfg, ckpt, tr, te, mask_non_rare(te, bench_for_seed(cfg)))
    out = Path(args.out)
    save_checkpoint(out / f"{cfg.method}.npz", model, {"seed": cfg.seed, "method": cfg.method})
    write_metrics(out, [record], name=f"{cfg.method}_metrics")
    print(json.dumps(record.summary(), indent=2, sort_keys=True))
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    methods = args.methods.split(",") if args.methods else list(METHODS)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    records = run_matrix(methods, seeds, cfg, args.out, save_checkpoints=args.save_checkpoints)
    for r in records:
        if r.method != "pretrain":
            print(f"{r.method:>10s} seed={r.seed} test={r.final_test_accuracy:.4f} "
                  f"masked={r.final_masked_accuracy:.4f}")
    return 0


def cmd_selftest(args) -> int:
    from ..selftest import run_all

    return 0 if run_all(seed=args.seed or 0) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchtune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file with TrainConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (bench.* for the benchmark)")
        return p

    common(sub.add_parser("gen", help="write planted datasets")).set_defaults(fn=cmd_gen)
    p = common(sub.add_parser("audit", help="audit planted statistics"), out_required=False)
    p.add_argument("--data", help="datasets.npz written by gen")
    p.set_defaults(fn=cmd_audit)
    p = common(sub.add_parser("pretrain", help="pre-train on the planted pre-training split"))
    p.add_argument("--data")
    p.set_defaults(fn=cmd_pretrain)
    p = common(sub.add_parser("finetune", help="fine-tune one method"))
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="pretrain.npz; pre-trains afresh when omitted")
    p.set_defaults(fn=cmd_finetune)
    p = common(sub.add_parser("matrix", help="methods x seeds experiment"))
    p.add_argument("--methods", help="comma-separated, default all")
    p.add_argument("--seeds", help="comma-separated, default --seed")
    p.add_argument("--save-checkpoints", action="store_true")
    p.set_defaults(fn=cmd_matrix)
    p = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except PatchTuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
