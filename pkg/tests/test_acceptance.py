"""Acceptance criteria 1-7.

Each test records one PASS/FAIL line, printed together at the end of the
session. Criteria 4-7 share the desk-scale runs built once per module: the
procedural dataset, the alternate-sampling run (trained twice for the
determinism check and resumed once), and three ablation runs. Expect roughly
an hour on one CPU core.
"""

import csv
import filecmp
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from hicmd import cli, losses
from hicmd import gradcheck as gc
from hicmd.config import RunConfig, format_config, load_config
from hicmd.data import SyntheticSpec, read_factors
from hicmd.hfl import HFL, ce_loss
from hicmd.networks import Discriminators, Generator, forward_generation
from hicmd.probe import train_probe
from hicmd.retrieval import cmc_map, distance_histogram, load_features
from hicmd.types import CodeBundle

from oracles import random_instance, retrieval_oracle

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
# a shorter config may be swapped in for smoke runs; criterion 4 then fails
DESK = Path(os.environ.get("HICMD_DESK_CONFIG", ROOT / "configs" / "desk.txt"))
SUMMARY: list[str] = []
CLOSED_FORM_TOL = 1e-9


def record(number: int, ok: bool, detail: str) -> None:
    SUMMARY.append(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}")


def run(*args) -> None:
    assert cli.main([str(a) for a in args]) == 0, args


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    errors = gc.run_gradcheck(gc.TINY)
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    cfg = gc.TINY
    small = (cfg.height, cfg.width) == (8, 8) and max(cfg.style_dim, cfg.illum_dim,
                                                      cfg.pose_dim) <= 4
    ok = small and errors[worst] <= 1e-4 and seconds <= 120
    record(1, ok, f"{len(errors)} losses, max rel err {errors[worst]:.2e} ({worst}) "
                  f"<= 1e-4, {seconds:.1f}s <= 120s")
    assert ok


# 2 -------------------------------------------------------------------------

def test_criterion_2_metric_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        d, q, g = random_instance(rng, max_gallery=6)
        r = cmc_map(d, q, g, max_rank=6)
        aps, cmc = retrieval_oracle(d.tolist(), q, g, 6)
        mismatches += r.ap.tolist() != aps or r.cmc.tolist() != cmc
    ex = cmc_map(np.array([[0.3, 0.5, 0.9]]), [2], [1, 2, 3], max_rank=3)
    example_ok = ex.ap.tolist() == [0.5] and ex.cmc.tolist() == [0.0, 1.0, 1.0]
    ok = mismatches == 0 and example_ok
    record(2, ok, f"{200 - mismatches}/200 exact oracle matches; rank-2-of-3 example "
                  f"AP={ex.ap[0]} CMC={tuple(ex.cmc.tolist())}")
    assert ok


# 3 -------------------------------------------------------------------------

def test_criterion_3_closed_form_losses():
    cfg = RunConfig(height=16, width=8, base_channels=2, mlp_dim=4, dis_channels=2,
                    dis_layers=2, adv_variant="minimax", dtype="float64")
    torch.manual_seed(0)
    gen, dis = Generator(cfg).double(), Discriminators(cfg).double()
    g = torch.Generator().manual_seed(0)
    x1, x2 = (torch.rand(3, 3, 16, 8, generator=g, dtype=torch.float64) * 2 - 1
              for _ in range(2))
    rec = forward_generation(x1, x2, gen)
    # freshly built discriminators score 0.5 everywhere
    adv_g = float(losses.adv_generator_loss(rec, dis, cfg).detach())
    adv_d = float(losses.adv_discriminator_loss(rec, dis).detach())

    head = HFL(cfg, 20).double()
    with torch.no_grad():
        head.classifier.weight.zero_()
        head.classifier.bias.zero_()
    _, logits = head(rec.codes1.prototype, rec.codes1.style)
    ce = float(ce_loss(logits, torch.tensor([0, 7, 19])).detach())

    e1 = torch.zeros(1, 8, dtype=torch.float64)
    e1[0, 0] = 1.0
    z = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    b1 = CodeBundle(z, e1[:, :0], e1[:, :4], e1[:, 4:])
    b0 = CodeBundle(z, e1[:, :0], 0 * e1[:, :4], 0 * e1[:, 4:])
    kl = float(losses.kl_loss(b1, b0))

    checks = {
        "adv_gen": (adv_g, 4 * math.log(0.5)),
        "adv_dis": (adv_d, -6 * math.log(0.5)),
        "ce": (ce, math.log(20)),
        "kl": (kl, 0.5),
    }
    worst = max(abs(a - b) for a, b in checks.values())
    ok = worst <= CLOSED_FORM_TOL
    record(3, ok, ", ".join(f"{k}={a:.6f}" for k, (a, _) in checks.items())
           + f"; max abs err {worst:.1e} <= 1e-9")
    assert ok


# shared desk-scale runs ------------------------------------------------------

VARIANTS = {
    "alternate": "",
    "original": "sampling = original\n",
    "P": "feature_mode = P\n",
    "A": "feature_mode = A\n",
}


def _train_eval(data: Path, config: Path, out: Path) -> dict:
    run("train", "--config", config, "--data", data, "--out", out, "--log-every", 500)
    cfg = load_config(config)
    ckpt = out / f"checkpoint_{cfg.iterations}.bin"
    run("eval", "--checkpoint", ckpt, "--data", data, "--out", out / "eval")
    with open(out / "eval" / "metrics.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    return {"rank1": float(row["rank1"]), "rank10": float(row["rank10"]),
            "mAP": float(row["mAP"]), "checkpoint": ckpt, "out": out}


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    base = tmp_path_factory.mktemp("desk")
    data = base / "data"
    run("make-synthetic", "--out", data, "--identities", 20, "--poses", 10, "--size", "64x32",
        "--seed", 0)
    desk_cfg = load_config(DESK)
    runs = {}
    for name, extra in VARIANTS.items():
        cfg_path = base / f"{name}.txt"
        cfg_path.write_text(DESK.read_text() + extra)
        runs[name] = _train_eval(data, cfg_path, base / name)
    return {"base": base, "data": data, "cfg": desk_cfg, "runs": runs,
            "config": base / "alternate.txt"}


# 4 -------------------------------------------------------------------------

def test_criterion_4_end_to_end(desk):
    main = desk["runs"]["alternate"]
    rows = losses.read_loss_csv(main["out"] / "losses.csv")
    same10 = rows[9][1].recon_same
    last = rows[-1][1].recon_same
    feats, ids, mods = load_features(main["out"] / "eval" / "features.npz")
    hist = distance_histogram(feats, ids, mods)
    a = last < 0.5 * same10
    b = main["rank1"] >= 10 * 0.05 and main["mAP"] >= 0.5
    c = hist.intra_mean < hist.inter_mean
    ok = a and b and c and len(rows) == desk["cfg"].iterations == 2000
    record(4, ok, f"(a) recon_same {same10:.3f} -> {last:.3f} (ratio {last / same10:.2f} < 0.5); "
                  f"(b) rank-1 {main['rank1']:.3f} >= 0.50, mAP {main['mAP']:.3f} >= 0.5; "
                  f"(c) intra {hist.intra_mean:.2f} < inter {hist.inter_mean:.2f}")
    assert ok


# 5 -------------------------------------------------------------------------

def test_criterion_5_ablation_order(desk):
    m = {k: v["mAP"] for k, v in desk["runs"].items()}
    ok = m["alternate"] > m["original"] >= m["P"] > m["A"]
    record(5, ok, "mAP alternate {alternate:.4f} > original {original:.4f} >= P {P:.4f} "
                  "> A {A:.4f}".format(**m))
    assert ok


# 6 -------------------------------------------------------------------------

def test_criterion_6_determinism(desk):
    base, main = desk["base"], desk["runs"]["alternate"]
    again = _train_eval(desk["data"], desk["config"], base / "alternate_again")
    same_files = ["losses.csv"] + [f"eval/{n}" for n in ("metrics.csv", "cmc.csv",
                                                          "histogram.csv")]
    identical = all(filecmp.cmp(main["out"] / f, again["out"] / f, shallow=False)
                    for f in same_files)

    # resume from a late checkpoint inside a fresh copy of the run
    cfg = desk["cfg"]
    at = cfg.checkpoint_every * ((3 * cfg.iterations // 4) // cfg.checkpoint_every)
    resumed = base / "alternate_resumed"
    shutil.copytree(main["out"], resumed,
                    ignore=shutil.ignore_patterns("eval", f"*_{cfg.iterations}.bin"))
    run("train", "--config", desk["config"], "--data", desk["data"], "--out", resumed,
        "--resume", resumed / f"checkpoint_{at}.bin", "--log-every", 0)
    curve = filecmp.cmp(main["out"] / "losses.csv", resumed / "losses.csv", shallow=False)
    ok = identical and curve
    record(6, ok, f"second train+eval byte-identical on {len(same_files)} CSVs: {identical}; "
                  f"resume from iteration {at} reproduces losses.csv: {curve}")
    assert ok


# 7 -------------------------------------------------------------------------

def _grid_cells(path: Path, h: int, w: int) -> np.ndarray:
    grid = np.asarray(Image.open(path)).astype(np.float64) / 127.5 - 1
    n_rows, n_cols = grid.shape[0] // h - 1, grid.shape[1] // w - 1
    return np.array([[grid[(i + 1) * h:(i + 2) * h, (j + 1) * w:(j + 2) * w]
                      for j in range(n_cols)] for i in range(n_rows)])


def test_criterion_7_generation_sanity(desk, tmp_path):
    main, data = desk["runs"]["alternate"], desk["data"]
    out = tmp_path / "swap.png"
    run("generate", "--checkpoint", main["checkpoint"], "--data", data,
        "--mode", "swap-excluded", "--out", out)
    cells = _grid_cells(out, 64, 32)
    with open(out.with_suffix(".csv"), newline="") as fh:
        manifest = list(csv.DictReader(fh))
    factors = read_factors(data / "factors.csv")
    want = np.zeros(cells.shape[:2], dtype=int)
    for row in manifest:
        want[int(row["row"]) - 1, int(row["col"]) - 1] = int(factors[row["input_id"]]["stripes"])

    # probe rendered from a different seed than the evaluated dataset
    probe, train_acc = train_probe(SyntheticSpec(poses=12), seed=1)
    pred = probe.predict(cells.reshape(-1, 64, 32, 3).astype(np.float32)).reshape(want.shape)
    acc = float((pred == want).mean())
    # cells within a row follow their references, so they must differ
    spread = float(np.mean([np.abs(r[:, None] - r[None, :]).mean() for r in cells]))
    ok = acc >= 0.8 and spread > 0.02
    record(7, ok, f"stripe pattern recovered on {acc:.1%} of {pred.size} cells (>= 80%); "
                  f"mean within-row cell difference {spread:.3f} > 0.02; "
                  f"probe train acc {train_acc:.1%}")
    assert ok


# measured properties of the trained run that are not numbered criteria ------

def test_discriminator_prefers_real(desk):
    from hicmd.data import index_folder, load_images, sample_pair_batch
    from hicmd.training import load_checkpoint

    state = load_checkpoint(desk["runs"]["alternate"]["checkpoint"]).eval()
    train = index_folder(desk["data"])
    images = load_images(train, 64, 32)
    batch = sample_pair_batch(train, np.random.default_rng(0), 8, images)
    x1, x2, _ = batch.tensors()
    with torch.no_grad():
        rec = forward_generation(x1, x2, state.gen)
        for m in (1, 2):
            real = state.dis(rec.real(m), m).mean()
            fake = torch.cat([state.dis(f, m) for f in rec.fakes(m)]).mean()
            assert real > fake


def test_same_person_prototypes_closer(desk):
    from hicmd.data import index_folder, load_images
    from hicmd.training import load_checkpoint

    state = load_checkpoint(desk["runs"]["alternate"]["checkpoint"]).eval()
    root = desk["data"]
    ims = load_images(index_folder(root, ("query", "gallery")), 64, 32)
    with torch.no_grad():
        emb = []
        for im in ims:
            p = state.gen.encode_prototype(im, im.modality)
            emb.append(state.hfl.embed(p)[0].numpy())
    hist = distance_histogram(np.array(emb), [im.identity for im in ims],
                              [im.modality for im in ims])
    assert hist.intra_mean < hist.inter_mean


def test_same_recon_halves_within_500_iterations(desk):
    rows = losses.read_loss_csv(desk["runs"]["alternate"]["out"] / "losses.csv")
    assert rows[499][1].recon_same <= 0.5 * rows[9][1].recon_same


def test_config_snapshot_matches_desk_file(desk):
    snap = (desk["runs"]["alternate"]["out"] / "config_snapshot.txt").read_text()
    cfg = load_config(desk["config"]).replace(data_path=str(desk["data"]))
    assert snap == format_config(cfg)
