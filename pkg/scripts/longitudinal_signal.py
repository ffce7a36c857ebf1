"""Train the longitudinal model twice, with real and with zeroed priors, and compare final loss.

    python3 scripts/longitudinal_signal.py --patients 6 --steps 400
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from ct2rep.config import RunConfig
from ct2rep.experiments import longitudinal_signal_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--patients", type=int, default=6)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--persistence", type=float, default=0.8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/signal"))
    args = ap.parse_args()
    t0 = time.time()
    res = longitudinal_signal_run(args.out, RunConfig.desk(seed=args.seed), args.patients, args.steps,
                                  args.persistence)
    print(f"pairs={res.n_pairs} steps={res.steps} with_priors={res.loss_with_priors:.5f} "
          f"zero_priors={res.loss_zero_priors:.5f} prior_helps={res.prior_helps} time={time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
