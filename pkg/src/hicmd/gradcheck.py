"""Central finite-difference verification of every loss gradient.

Each loss is viewed as a scalar function of a parameter group. The autograd
gradient ``g`` is compared with ``(f(theta + eps v) - f(theta - eps v)) / 2 eps``
along random unit directions ``v``, and along single coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from . import losses
from .config import RunConfig
from .networks import forward_generation
from .training import TrainState, build_state, generator_components

TOLERANCE = 1e-4

TINY = RunConfig(
    height=8, width=8, style_dim=4, illum_dim=2, pose_dim=2, proto_channels=4,
    base_channels=2, n_downsample=2, n_res=1, mlp_dim=4, dis_channels=2, dis_layers=2,
    proto_embed_dim=4, feature_dim=4, batch_pairs=3, grad_clip=0.0,
    adv_variant="minimax", dtype="float64", seed=0,
)


@dataclass
class Problem:
    state: TrainState
    x1: torch.Tensor
    x2: torch.Tensor
    labels: torch.Tensor
    iteration: int = 1  # odd: exercises cross-source feature pairs


def _components(p: Problem) -> dict[str, torch.Tensor]:
    rec = forward_generation(p.x1, p.x2, p.state.gen)
    return generator_components(p.state, rec, p.labels, p.iteration)


def _rec(p: Problem):
    return forward_generation(p.x1, p.x2, p.state.gen)


# name -> (loss function, parameter group it is differentiated against)
LOSSES: dict[str, tuple[Callable[[Problem], torch.Tensor], str]] = {
    "recon_cross": (lambda p: losses.cross_recon_loss(_rec(p)), "gen"),
    "recon_same": (lambda p: losses.same_recon_loss(_rec(p)), "gen"),
    "recon_cycle": (lambda p: losses.cycle_recon_loss(_rec(p)), "gen"),
    "recon_code": (lambda p: losses.code_recon_loss(_rec(p)), "gen"),
    "kl": (lambda p: losses.kl_loss(_rec(p).codes1, _rec(p).codes2), "gen"),
    "adv_gen": (lambda p: losses.adv_generator_loss(_rec(p), p.state.dis, p.state.cfg), "gen"),
    "adv_dis": (lambda p: losses.adv_discriminator_loss(_rec(p), p.state.dis), "dis"),
    "ce": (lambda p: _components(p)["ce"], "gen+hfl"),
    "trip": (lambda p: _components(p)["trip"], "gen+hfl"),
    "recon_total": (lambda p: losses.recon_total(_rec(p), p.state.cfg), "gen"),
    "total": (lambda p: losses.total_loss(_components(p), p.state.cfg), "gen+hfl"),
}


def make_problem(cfg: RunConfig = TINY, seed: int = 0) -> Problem:
    n = cfg.batch_pairs
    state = build_state(cfg, num_classes=n)
    g = torch.Generator().manual_seed(seed)
    shape = (n, 3, cfg.height, cfg.width)
    x1 = torch.tanh(torch.randn(shape, generator=g, dtype=torch.float64))
    x2 = torch.tanh(torch.randn(shape, generator=g, dtype=torch.float64))
    # a trained-looking discriminator so the adversarial terms are not flat
    with torch.no_grad():
        for prm in state.dis.parameters():
            prm.add_(0.5 * torch.randn(prm.shape, generator=g, dtype=prm.dtype))
    return Problem(state, x1, x2, torch.arange(n))


def _params(p: Problem, group: str) -> list[torch.Tensor]:
    mods = {"gen": [p.state.gen], "dis": [p.state.dis], "gen+hfl": [p.state.gen, p.state.hfl]}
    return [t for m in mods[group] for t in m.parameters() if t.requires_grad]


def _rel_err(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_loss(p: Problem, fn: Callable[[Problem], torch.Tensor], group: str,
               directions: int = 4, coordinates: int = 4, eps: float = 1e-6,
               seed: int = 0) -> float:
    """Max relative error between autograd and central differences."""
    params = _params(p, group)
    for t in params:
        t.grad = None
    loss = fn(p)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(params, grads)]

    gen = torch.Generator().manual_seed(seed)
    probes = []
    for _ in range(directions):
        vs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in params]
        norm = torch.sqrt(sum((v ** 2).sum() for v in vs))
        probes.append([v / norm for v in vs])
    # single coordinates, chosen among those with the largest gradient
    flat = torch.cat([g.reshape(-1) for g in grads])
    for idx in torch.topk(flat.abs(), min(coordinates, flat.numel())).indices.tolist():
        vs, offset = [], 0
        for t in params:
            v = torch.zeros_like(t)
            if offset <= idx < offset + t.numel():
                v.view(-1)[idx - offset] = 1.0
            vs.append(v)
            offset += t.numel()
        probes.append(vs)

    worst = 0.0
    backup = [t.detach().clone() for t in params]
    with torch.no_grad():
        for vs in probes:
            analytic = float(sum((g * v).sum() for g, v in zip(grads, vs)))
            values = []
            for sign in (1.0, -1.0):
                for t, b, v in zip(params, backup, vs):
                    t.copy_(b + sign * eps * v)
                values.append(float(fn(p)))
            for t, b in zip(params, backup):
                t.copy_(b)
            numeric = (values[0] - values[1]) / (2 * eps)
            worst = max(worst, _rel_err(analytic, numeric))
    return worst


def run_gradcheck(cfg: RunConfig = TINY, names=None, **kwargs) -> dict[str, float]:
    """Check every registered loss; returns name -> max relative error."""
    problem = make_problem(cfg)
    out = {}
    for name in names or LOSSES:
        fn, group = LOSSES[name]
        out[name] = check_loss(problem, fn, group, **kwargs)
    return out
