"""Train on the procedural dataset and report retrieval metrics.

    python scripts/run_synthetic.py --iterations 2000 --set sampling=original
"""

import argparse
import json
import logging
import time

from hicmd.config import RunConfig, parse_config
from hicmd.data import SyntheticSpec, make_synthetic
from hicmd.experiment import evaluate
from hicmd.training import fit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], help="config override key=value")
    ap.add_argument("--data", action="append", default=[],
                    help="synthetic dataset override key=value, e.g. noise=0.1")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = parse_config("\n".join(args.set), RunConfig(iterations=args.iterations, seed=args.seed))
    overrides = {}
    for item in args.data:
        key, value = item.split("=", 1)
        overrides[key] = type(getattr(SyntheticSpec, key))(value)
    spec = SyntheticSpec(height=cfg.height, width=cfg.width, **overrides)
    index, _ = make_synthetic(spec, args.data_seed)
    t0 = time.time()
    state, reports = fit(cfg, index, out=args.out, progress_every=100)
    ev = evaluate(state, index, seed=args.seed)
    summary = ev.summary()
    summary.update(seconds=round(time.time() - t0, 1), alpha=float(state.hfl.alpha.detach()),
                   same_10=reports[9].recon_same, same_last=reports[-1].recon_same)
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
