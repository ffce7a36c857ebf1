"""``ct2rep`` command line: synth, train, generate, eval, inspect-checkpoint."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import RunConfig, apply_overrides, parse_override
from .synthdata import synth_dataset
from .tensor import ContractError
from .train import run_eval, run_generate, run_train


def load_config(args) -> RunConfig:
    """Config file (or the desk preset), then ``--seed``, then ``--set`` overrides; flags win."""
    if args.config:
        cfg = RunConfig.load(args.config)
    elif getattr(args, "desk", False):
        cfg = RunConfig.desk()
    else:
        cfg = RunConfig()
    overrides = dict(parse_override(s) for s in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return apply_overrides(cfg, overrides) if overrides else cfg


def cmd_synth(args) -> int:
    ds = synth_dataset(args.out, args.patients, (args.min_visits, args.max_visits), args.seed or 0,
                       tuple(args.shape), args.persistence)
    print(json.dumps({"train": str(ds.train_manifest), "val": str(ds.val_manifest),
                      "train_pairs": str(ds.train_pairs), "val_pairs": str(ds.val_pairs),
                      "train_patients": len(ds.train_patients), "val_patients": len(ds.val_patients)}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    res = run_train(cfg, args.manifest, args.mode, args.out, resume=args.resume, prior=args.prior)
    last = f"{res.losses[-1]:.6f}" if res.losses else "n/a"
    print(f"steps={res.step} final_loss={last} checkpoint={res.checkpoint}")
    return 0


def cmd_generate(args) -> int:
    rows = run_generate(args.checkpoint, args.manifest, args.mode, args.out, args.decode)
    print(f"wrote {len(rows)} reports to {args.out}")
    return 0


def cmd_eval(args) -> int:
    report = run_eval(args.predictions, args.references, args.out)
    keys = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "precision", "recall", "f1")
    print("  ".join(f"{k}={report[k]:.4f}" for k in keys))
    for row in report["per_label"]:
        print(f"  {row['label']:<36} P={row['precision']:.3f} R={row['recall']:.3f} F1={row['f1']:.3f}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    n = sum(v.size for v in ckpt.weights.values())
    info = {"model_kind": ckpt.model_kind, "step": ckpt.step, "optimizer_step": ckpt.optimizer_step,
            "vocab_size": len(ckpt.vocab), "parameters": int(n), "format_version": ckpt_io.FORMAT_VERSION,
            "config": ckpt.config.to_dict()}
    if args.verify:
        info["roundtrip_ok"] = ckpt_io.checkpoint_roundtrip(args.checkpoint)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ct2rep", description="3D CT report generation at desk scale")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", type=Path, help="JSON RunConfig")
            p.add_argument("--desk", action="store_true", help="start from the desk-scale preset")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. model.dim=32")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, config=False)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--patients", type=int, default=16)
    p.add_argument("--min-visits", type=int, default=1)
    p.add_argument("--max-visits", type=int, default=3)
    p.add_argument("--shape", type=int, nargs=3, default=(24, 48, 48))
    p.add_argument("--persistence", type=float, default=0.8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("manifest", type=Path, help="volume manifest (base) or pairs manifest (long)")
    p.add_argument("--mode", choices=("base", "long"), default="base")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--resume", type=Path)
    p.add_argument("--prior", choices=("real", "zero"), default="real")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode reports with a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--mode", choices=("base", "long"), default="base")
    p.add_argument("--decode", choices=("greedy", "beam"))
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("predictions", type=Path)
    p.add_argument("references", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--verify", action="store_true", help="also check the byte-exact round trip")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
