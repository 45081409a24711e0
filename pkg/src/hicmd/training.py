"""Alternating discriminator / generator optimisation, checkpoints and logs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import hfl as hfl_mod
from . import losses
from .config import RunConfig, format_config, parse_config, save_config, validate_config
from .data import DatasetError, DatasetIndex, load_images, sample_pair_batch
from .hfl import HFL
from .networks import Discriminators, Generator, forward_generation
from .types import ImageTensor, PairBatch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hicmd-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def torch_dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


@dataclass
class TrainState:
    cfg: RunConfig
    gen: Generator
    hfl: HFL
    dis: Discriminators
    opt_gen: torch.optim.Optimizer
    opt_hfl: torch.optim.Optimizer
    opt_dis: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0

    @property
    def num_classes(self) -> int:
        return self.hfl.num_classes

    def generator_params(self) -> dict[str, torch.Tensor]:
        named = {f"gen.{k}": v for k, v in self.gen.named_parameters()}
        named.update({f"hfl.{k}": v for k, v in self.hfl.named_parameters()})
        return named

    def discriminator_params(self) -> dict[str, torch.Tensor]:
        return {f"dis.{k}": v for k, v in self.dis.named_parameters()}

    def eval(self) -> "TrainState":
        for m in (self.gen, self.hfl, self.dis):
            m.eval()
        return self


def build_state(cfg: RunConfig, num_classes: int) -> TrainState:
    validate_config(cfg)
    if num_classes < 2:
        raise DatasetError(f"training needs at least 2 identities, got {num_classes}")
    torch.manual_seed(cfg.seed)
    dtype = torch_dtype(cfg)
    gen = Generator(cfg).to(dtype)
    hfl = HFL(cfg, num_classes).to(dtype)
    dis = Discriminators(cfg).to(dtype)
    opt_gen = torch.optim.Adam(gen.parameters(), lr=cfg.lr_gen, betas=(cfg.beta1, cfg.beta2))
    opt_hfl = torch.optim.SGD([p for p in hfl.parameters() if p.requires_grad],
                              lr=cfg.lr_hfl, momentum=cfg.momentum_hfl)
    opt_dis = torch.optim.Adam(dis.parameters(), lr=cfg.lr_dis, betas=(cfg.beta1, cfg.beta2))
    return TrainState(cfg, gen, hfl, dis, opt_gen, opt_hfl, opt_dis,
                      np.random.default_rng(cfg.seed))


def generator_components(state: TrainState, rec, labels: torch.Tensor,
                         iteration: int) -> dict[str, torch.Tensor]:
    """Every generator-side loss term for one generation record."""
    cfg = state.cfg
    selections = hfl_mod.alternate_sample(rec, iteration, cfg.sampling)
    feats, logits, ys = hfl_mod.gather_features(rec, selections, labels, state.hfl)
    return {
        "recon_cross": losses.cross_recon_loss(rec),
        "recon_same": losses.same_recon_loss(rec),
        "recon_cycle": losses.cycle_recon_loss(rec),
        "recon_code": losses.code_recon_loss(rec),
        "kl": losses.kl_loss(rec.codes1, rec.codes2),
        "adv_gen": losses.adv_generator_loss(rec, state.dis, cfg),
        "ce": hfl_mod.ce_loss(logits, ys),
        "trip": hfl_mod.triplet_loss(feats, ys, cfg.margin),
    }


def _check_finite(parts: dict[str, torch.Tensor]) -> None:
    for name, v in parts.items():
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"non-finite loss component {name!r} ({float(v)})")


def _clip(params, max_norm: float) -> None:
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(list(params), max_norm)


def train_step(state: TrainState, batch: PairBatch) -> losses.LossReport:
    """One discriminator update followed by one generator + feature update.

    Mutates ``state`` in place and returns the loss report for the step.
    """
    cfg = state.cfg
    x1, x2, labels = batch.tensors(torch_dtype(cfg))
    for m in (state.gen, state.hfl, state.dis):
        m.train()
    rec = forward_generation(x1, x2, state.gen)

    # discriminator step: generator outputs are detached inside the loss
    state.opt_dis.zero_grad(set_to_none=True)
    dis_loss = losses.adv_discriminator_loss(rec, state.dis)
    _check_finite({"adv_dis": dis_loss})
    dis_loss.backward()
    _clip(state.dis.parameters(), cfg.grad_clip)
    state.opt_dis.step()

    # generator step with the discriminators frozen
    state.dis.requires_grad_(False)
    try:
        parts = generator_components(state, rec, labels, state.iteration)
        _check_finite(parts)
        total = losses.total_loss(parts, cfg)
        _check_finite({"total": total})
        state.opt_gen.zero_grad(set_to_none=True)
        state.opt_hfl.zero_grad(set_to_none=True)
        total.backward()
    finally:
        state.dis.requires_grad_(True)
    _clip(list(state.gen.parameters()) + list(state.hfl.parameters()), cfg.grad_clip)
    state.opt_gen.step()
    state.opt_hfl.step()
    state.hfl.clamp_alpha()
    state.iteration += 1

    values = {k: float(v.detach()) for k, v in parts.items()}
    return losses.LossReport(adv_dis=float(dis_loss.detach()), total=float(total.detach()),
                             **values)


# checkpoints ---------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | Path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": format_config(state.cfg),
        "iteration": state.iteration,
        "num_classes": state.num_classes,
        "generator": state.gen.state_dict(),
        "hfl": state.hfl.state_dict(),
        "discriminator": state.dis.state_dict(),
        "opt_gen": state.opt_gen.state_dict(),
        "opt_hfl": state.opt_hfl.state_dict(),
        "opt_dis": state.opt_dis.state_dict(),
        "rng": state.rng.bit_generator.state,
    }, path)


def _load_module(module: torch.nn.Module, saved: dict, what: str) -> None:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(saved))
    extra = sorted(set(saved) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{what}: parameter names differ (missing {missing[:3]}, "
                              f"unexpected {extra[:3]})")
    for k, v in expected.items():
        if tuple(saved[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{what}.{k}: shape {tuple(saved[k].shape)} in checkpoint, "
                                  f"{tuple(v.shape)} expected")
    module.load_state_dict(saved)


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> TrainState:
    """Restore a training state. ``cfg`` overrides the stored configuration
    (e.g. to extend the iteration budget); shapes must still agree."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if blob["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob['version']}")
    cfg = cfg or parse_config(blob["config"])
    state = build_state(cfg, blob["num_classes"])
    _load_module(state.gen, blob["generator"], "generator")
    _load_module(state.hfl, blob["hfl"], "hfl")
    _load_module(state.dis, blob["discriminator"], "discriminator")
    state.opt_gen.load_state_dict(blob["opt_gen"])
    state.opt_hfl.load_state_dict(blob["opt_hfl"])
    state.opt_dis.load_state_dict(blob["opt_dis"])
    state.rng.bit_generator.state = blob["rng"]
    state.iteration = blob["iteration"]
    return state


def checkpoint_config(path: str | Path) -> RunConfig:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return parse_config(blob["config"])


# training loop -------------------------------------------------------------

def _truncate_log(path: Path, iteration: int) -> None:
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < iteration]
    path.write_text("".join(kept))


def fit(cfg: RunConfig, dataset: DatasetIndex, out: str | Path | None = None,
        resume: TrainState | None = None, images: Sequence[ImageTensor] | None = None,
        progress_every: int = 0) -> tuple[TrainState, list[losses.LossReport]]:
    """Train for ``cfg.iterations`` steps on the ``train`` split of ``dataset``.

    With ``out`` set, writes ``losses.csv``, ``config_snapshot.txt`` and
    ``checkpoint_<iter>.bin`` files there.
    """
    validate_config(cfg)
    train = dataset.subset("train") if "train" in dataset.splits else dataset
    if len(train.identities()) < 2:
        raise DatasetError("dataset has fewer than 2 training identities")
    if images is None:
        images = load_images(train, cfg.height, cfg.width)
    num_classes = cfg.num_classes or max(train.identities())
    state = resume or build_state(cfg, num_classes)

    out_dir = Path(out) if out is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config_snapshot.txt")
        csv_path = out_dir / "losses.csv"
        if resume is not None and csv_path.exists():
            _truncate_log(csv_path, state.iteration)
            log_file = losses.LossLog(csv_path, append=True)
        else:
            log_file = losses.LossLog(csv_path)

    reports = []
    try:
        while state.iteration < cfg.iterations:
            batch = sample_pair_batch(train, state.rng, cfg.batch_pairs, images)
            it = state.iteration
            report = train_step(state, batch)
            reports.append(report)
            if log_file is not None:
                log_file.write(it, report)
            if progress_every and state.iteration % progress_every == 0:
                log.info("iter %d total %.4f same %.4f ce %.4f trip %.4f alpha %.3f",
                         state.iteration, report.total, report.recon_same, report.ce,
                         report.trip, float(state.hfl.alpha.detach()))
            if out_dir is not None and cfg.checkpoint_every and \
                    state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_{state.iteration}.bin")
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        final = out_dir / f"checkpoint_{state.iteration}.bin"
        if not final.exists():
            save_checkpoint(state, final)
    return state, reports
