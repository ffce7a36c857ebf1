"""Overfit a handful of synthetic samples and report corpus BLEU-1 on them.

    python3 scripts/memorize.py --mode base --pairs 8 --max-steps 2000
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from ct2rep.config import RunConfig
from ct2rep.experiments import memorization_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=("base", "long"), default="base")
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--eval-every", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/memorize"))
    args = ap.parse_args()
    t0 = time.time()
    res = memorization_run(args.out, RunConfig.desk(seed=args.seed), args.mode, args.pairs,
                           args.max_steps, args.eval_every,
                           progress=lambda step, loss, b1: print(f"step {step:5d}  loss {loss:.4f}  bleu1 {b1:.4f}",
                                                                 flush=True))
    print(f"mode={args.mode} steps={res.steps} bleu1={res.bleu1:.4f} final_loss={res.final_loss:.4f} "
          f"time={time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
