"""Command-line entry point: ``hicmd <command> [flags]``.

Commands: make-synthetic, train, eval, generate, interpolate, gradcheck.
``HICMD_SEED`` in the environment overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import (SPLITS, DatasetError, SyntheticSpec, index_folder, load_image,
                   make_synthetic, write_dataset)
from .experiment import eval_split, evaluate
from .retrieval import save_features, write_cmc_csv, write_histogram_csv
from .training import CheckpointError, fit, load_checkpoint
from .types import MODALITY_NAMES, ImageTensor
from .visualize import (MODES, compose_grid, compose_strip, interpolation_strip, save_png,
                        swap_grid, write_manifest)

log = logging.getLogger("hicmd")

MIN_TRAIN_IDENTITIES = 4
GRID_COUNT = 6


class CommandError(RuntimeError):
    pass


def _seed(args) -> int:
    env = os.environ.get("HICMD_SEED")
    return int(env) if env is not None else args.seed


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x32, got {text!r}") from None
    return h, w


def _ensure_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"{out} exists and is not empty (use --force)")


def cmd_make_synthetic(args) -> int:
    if args.identities < MIN_TRAIN_IDENTITIES:
        raise CommandError(
            f"--identities {args.identities}: training needs at least {MIN_TRAIN_IDENTITIES} "
            "identities (a smaller set is only usable for evaluation)")
    out = Path(args.out)
    _ensure_empty(out, args.force)
    h, w = args.size
    spec = SyntheticSpec(identities=args.identities, poses=args.poses, height=h, width=w,
                         test_poses=args.test_poses, noise=args.noise)
    index, factors = make_synthetic(spec, _seed(args))
    n = write_dataset(index, factors, out)
    print(f"wrote {n} images for {spec.identities} identities to {out}")
    return 0


def _train_index(path):
    root = Path(path)
    splits = [s for s in SPLITS if (root / s).is_dir()]
    if "train" not in splits:
        raise DatasetError(f"{root} has no train/ split")
    return index_folder(root, splits)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = _seed(args) if (args.seed is not None or "HICMD_SEED" in os.environ) else cfg.seed
    data = args.data or cfg.data_path
    if not data:
        raise CommandError("no dataset given (--data or data_path in the config)")
    cfg = cfg.replace(seed=seed, data_path=str(data))
    index = _train_index(data)
    resume = load_checkpoint(args.resume, cfg) if args.resume else None
    state, reports = fit(cfg, index, out=args.out, resume=resume, progress_every=args.log_every)
    last = reports[-1] if reports else None
    print(f"finished at iteration {state.iteration}"
          + (f", total loss {last.total:.4f}" if last else ""))
    return 0


def _eval_index(path):
    root = Path(path)
    splits = [s for s in ("query", "gallery") if (root / s).is_dir()]
    if not splits:
        splits = [s for s in SPLITS if (root / s).is_dir()]
    return index_folder(root, splits)


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    index = _eval_index(args.data)
    ev = evaluate(state, index, args.protocol, args.trials, _seed(args))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    s = ev.summary()
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "trials", "rank1", "rank10", "mAP"])
        w.writerow([args.protocol, args.trials, repr(s["rank1"]), repr(s["rank10"]),
                    repr(s["mAP"])])
    write_cmc_csv(ev.result, out / "cmc.csv")
    write_histogram_csv(ev.histogram, out / "histogram.csv")
    save_features(out / "features.npz", ev.features, ev.identities, ev.modalities)
    print(f"rank-1 {100 * s['rank1']:.2f}  rank-10 {100 * s['rank10']:.2f}  "
          f"mAP {100 * s['mAP']:.2f}")
    return 0


def _record_id(record, root: Path) -> str:
    try:
        return str(Path(record.path).relative_to(root))
    except ValueError:
        return str(record.path)


def cmd_generate(args) -> int:
    if args.mode not in MODES:
        raise CommandError(f"unknown mode {args.mode!r}")
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    root = Path(args.data)
    index = eval_split(index_folder(root, [s for s in SPLITS if (root / s).is_dir()]))
    rng = np.random.default_rng(_seed(args))
    k = min(GRID_COUNT, len(index))
    picks = [rng.choice(len(index), size=k, replace=False) for _ in range(2)]
    recs = [[index.records[int(i)] for i in p] for p in picks]
    inputs, refs = ([load_image(r, cfg.height, cfg.width) for r in rs] for rs in recs)
    cells = swap_grid(state.gen, inputs, refs, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(compose_grid(cells, inputs, refs), out)
    write_manifest(out.with_suffix(".csv"), [_record_id(r, root) for r in recs[0]],
                   [_record_id(r, root) for r in recs[1]], inputs, refs)
    print(f"wrote {k}x{k} {args.mode} grid to {out}")
    return 0


def _image_from_path(path: str, cfg: RunConfig) -> ImageTensor:
    p = Path(path)
    names = {v: k for k, v in MODALITY_NAMES.items()}
    if p.parent.name not in names:
        raise CommandError(f"{path}: parent folder must be one of {sorted(names)}")
    from .data import Record

    return load_image(Record(1, names[p.parent.name], "query", p.parent.parent.name, str(p)),
                      cfg.height, cfg.width)


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise CommandError("--steps must be at least 2")
    state = load_checkpoint(args.checkpoint)
    a, b = (_image_from_path(p, state.cfg) for p in args.pair)
    frames = interpolation_strip(state.gen, a, b, args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(compose_strip(frames), out)
    print(f"wrote {args.steps}-step interpolation strip to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = gc.TINY
    if args.config:
        cfg = parse_config(Path(args.config).read_text(), gc.TINY)
    errors = gc.run_gradcheck(cfg)
    failed = False
    for name, err in errors.items():
        ok = err <= gc.TOLERANCE
        failed |= not ok
        print(f"{name:12s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hicmd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="render the procedural two-modality dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--poses", type=int, default=10)
    p.add_argument("--size", type=_size, default=(64, 32), help="HxW, e.g. 64x32")
    p.add_argument("--test-poses", type=int, default=SyntheticSpec.test_poses,
                   help="last poses per identity held out for query/gallery")
    p.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train on a dataset folder")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-modality retrieval metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("allsearch", "regdb"), default="allsearch")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="factor-swap image grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES, default="swap-excluded")
    p.add_argument("--out", required=True, help="grid image path (.png)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interpolate", help="ID-excluded interpolation strip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", nargs=2, required=True, metavar=("IMAGE_A", "IMAGE_B"))
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigError, DatasetError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
