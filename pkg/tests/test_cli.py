import filecmp
import hashlib

import pytest

from hicmd import cli
from hicmd import gradcheck as gc
from hicmd.config import format_config


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["make-synthetic", "--out", str(out), "--identities", "4", "--poses", "4",
                     "--test-poses", "2", "--size", "8x8", "--force"]) == 0
    return out


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.txt"
    path.write_text(format_config(gc.TINY.replace(iterations=4, checkpoint_every=2)))
    return path


@pytest.fixture(scope="module")
def trained(dataset, config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(config), "--data", str(dataset),
                     "--out", str(out), "--seed", "0"]) == 0
    return out


def test_make_synthetic_counts(tmp_path, capsys):
    assert cli.main(["make-synthetic", "--out", str(tmp_path / "a"), "--size", "16x8"]) == 0
    assert "wrote 400 images" in capsys.readouterr().out
    assert cli.main(["make-synthetic", "--out", str(tmp_path / "b"), "--size", "16x8"]) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_make_synthetic_guards(tmp_path, capsys):
    assert cli.main(["make-synthetic", "--out", str(tmp_path / "x"), "--identities", "1"]) == 1
    assert "evaluation" in capsys.readouterr().err
    (tmp_path / "y").mkdir()
    (tmp_path / "y" / "f").write_text("")
    assert cli.main(["make-synthetic", "--out", str(tmp_path / "y")]) == 1


def test_train_outputs(trained):
    lines = (trained / "losses.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,recon_cross,recon_same")
    assert len(lines) == 5
    assert (trained / "checkpoint_2.bin").exists() and (trained / "checkpoint_4.bin").exists()
    assert (trained / "config_snapshot.txt").exists()


def test_train_is_reproducible_and_resumable(dataset, config, trained, tmp_path):
    assert cli.main(["train", "--config", str(config), "--data", str(dataset),
                     "--out", str(tmp_path / "again"), "--seed", "0"]) == 0
    assert filecmp.cmp(trained / "losses.csv", tmp_path / "again" / "losses.csv", shallow=False)
    assert cli.main(["train", "--config", str(config), "--data", str(dataset),
                     "--out", str(tmp_path / "again"),
                     "--resume", str(tmp_path / "again" / "checkpoint_2.bin")]) == 0
    assert filecmp.cmp(trained / "losses.csv", tmp_path / "again" / "losses.csv", shallow=False)


def test_seed_environment_override(dataset, config, trained, tmp_path, monkeypatch):
    monkeypatch.setenv("HICMD_SEED", "3")
    assert cli.main(["train", "--config", str(config), "--data", str(dataset),
                     "--out", str(tmp_path), "--seed", "0"]) == 0
    assert (tmp_path / "losses.csv").read_text() != (trained / "losses.csv").read_text()
    assert "seed = 3" in (tmp_path / "config_snapshot.txt").read_text()


def test_eval(dataset, trained, tmp_path, capsys):
    ckpt = str(trained / "checkpoint_4.bin")
    for sub in ("a", "b"):
        assert cli.main(["eval", "--checkpoint", ckpt, "--data", str(dataset),
                         "--out", str(tmp_path / sub)]) == 0
    out = capsys.readouterr().out
    assert "rank-1" in out and "rank-10" in out and "mAP" in out
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "protocol,trials,rank1,rank10,mAP"
    assert (tmp_path / "a" / "metrics.csv").read_text().splitlines()[1].startswith("allsearch,10,")
    for name in ("metrics.csv", "cmc.csv", "histogram.csv"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", str(dataset), "--protocol",
                     "regdb", "--trials", "2", "--out", str(tmp_path / "c")]) == 0


def test_generate(dataset, trained, tmp_path):
    import numpy as np
    from PIL import Image

    ckpt = str(trained / "checkpoint_4.bin")
    for name in ("a.png", "b.png"):
        assert cli.main(["generate", "--checkpoint", ckpt, "--data", str(dataset),
                         "--mode", "swap-excluded", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    grid = np.asarray(Image.open(tmp_path / "a.png"))
    assert grid.shape == (7 * 8, 7 * 8, 3)  # 6 inputs x 6 references plus header strips
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert len(rows) == 1 + 36
    for mode in ("swap-discriminative", "swap-illum"):
        assert cli.main(["generate", "--checkpoint", ckpt, "--data", str(dataset),
                         "--mode", mode, "--out", str(tmp_path / f"{mode}.png")]) == 0


def test_interpolate(dataset, trained, tmp_path):
    import numpy as np
    from PIL import Image

    a = next((dataset / "query").rglob("*.png"))
    b = next((dataset / "gallery").rglob("*.png"))
    assert cli.main(["interpolate", "--checkpoint", str(trained / "checkpoint_4.bin"),
                     "--pair", str(a), str(b), "--steps", "5",
                     "--out", str(tmp_path / "s.png")]) == 0
    assert np.asarray(Image.open(tmp_path / "s.png")).shape == (8, 5 * 8, 3)
    assert cli.main(["interpolate", "--checkpoint", str(trained / "checkpoint_4.bin"),
                     "--pair", str(a), str(b), "--steps", "1",
                     "--out", str(tmp_path / "t.png")]) == 1


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("recon_cross", "recon_same", "recon_cycle", "recon_code", "kl", "adv_gen",
                 "adv_dis", "ce", "trip"):
        assert name in out


def test_gradcheck_detects_corrupted_gradient(monkeypatch, capsys):
    import torch

    class Scramble(torch.autograd.Function):
        """Identity forward, doubled backward."""

        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return 2 * g

    fn, group = gc.LOSSES["kl"]
    monkeypatch.setattr(gc, "LOSSES", {"kl": (lambda p: Scramble.apply(fn(p)), group)})
    assert cli.main(["gradcheck"]) == 1
    assert "FAIL" in capsys.readouterr().out
