"""Hierarchical feature learning: prototype embedding H, the alpha-weighted
re-entangling of (p^d, a^s), the identity head, alternate sampling over
original and cross-reconstructed images, and the discriminative losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .networks import GenerationRecord

# the four code sources available for one identity
SOURCES = ("x1", "x2", "x12", "x21")
# cross-source shifts cycled on odd iterations; shift k pairs the prototype of
# source i with the style of source (i + k) % 4
_CROSS_SHIFTS = (2, 1, 3)


class Embedding(nn.Module):
    """Compact conv stack + global pooling mapping a prototype tensor to p^d.

    Group/layer normalisation keep p^d at unit scale without any dependence
    on batch composition.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        c = cfg.proto_channels
        self.shape = (c, *cfg.proto_shape[:2])
        groups = math.gcd(c, 8)
        self.net = nn.Sequential(
            nn.Conv2d(c, c, 3, 1, 1), nn.GroupNorm(groups, c), nn.ReLU(),
            nn.Conv2d(c, c, 3, 1, 1), nn.GroupNorm(groups, c), nn.ReLU(),
        )
        self.fc = nn.Linear(c, cfg.proto_embed_dim)
        self.norm = nn.LayerNorm(cfg.proto_embed_dim)

    def forward(self, p):
        if tuple(p.shape[1:]) != self.shape:
            raise ValueError(f"prototype shape {tuple(p.shape[1:])} != {self.shape}")
        return self.norm(self.fc(self.net(p).mean(dim=(2, 3))))


def combine(pd: torch.Tensor, style: torch.Tensor, alpha) -> torch.Tensor:
    """d^comb = [alpha * p^d ; (1 - alpha) * a^s]."""
    a = float(alpha.detach()) if torch.is_tensor(alpha) else float(alpha)
    if not 0 <= a <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {a}")
    return torch.cat([alpha * pd, (1 - alpha) * style], dim=-1)


class HFL(nn.Module):
    """Feature learning head shared by training and retrieval.

    ``feature_mode`` selects the ablations: "A+P" learns alpha, "P" fixes it to
    1 and "A" fixes it to 0.
    """

    def __init__(self, cfg: RunConfig, num_classes: int):
        super().__init__()
        self.embed = Embedding(cfg)
        self.mode = cfg.feature_mode
        init = {"A+P": cfg.alpha_init, "P": 1.0, "A": 0.0}[self.mode]
        self.alpha = nn.Parameter(torch.tensor(init), requires_grad=self.mode == "A+P")
        self.fc = nn.Linear(cfg.proto_embed_dim + cfg.style_dim, cfg.feature_dim)
        self.classifier = nn.Linear(cfg.feature_dim, num_classes)
        self.num_classes = num_classes

    def clamp_alpha(self) -> None:
        with torch.no_grad():
            self.alpha.clamp_(0.0, 1.0)

    def head(self, comb: torch.Tensor):
        f = self.fc(comb)
        return f, self.classifier(f)

    def forward(self, proto: torch.Tensor, style: torch.Tensor):
        """Return (features f, class logits)."""
        return self.head(combine(self.embed(proto), style, self.alpha))


def embed_prototype(p: torch.Tensor, params: HFL) -> torch.Tensor:
    return params.embed(p)


def head(comb: torch.Tensor, params: HFL):
    return params.head(comb)


@dataclass(frozen=True)
class Selection:
    identity: int  # position of the identity inside the batch
    proto_source: str
    style_source: str


def schedule(iteration: int, sampling: str = "alternate") -> list[tuple[str, str]]:
    """(prototype source, style source) pairs emitted for every identity."""
    if sampling == "original":
        return [("x1", "x1"), ("x2", "x2")]
    if iteration % 2 == 0:
        return [(s, s) for s in SOURCES]
    k = _CROSS_SHIFTS[(iteration // 2) % len(_CROSS_SHIFTS)]
    return [(SOURCES[i], SOURCES[(i + k) % 4]) for i in range(4)]


def alternate_sample(rec: GenerationRecord, iteration: int, sampling: str = "alternate"
                     ) -> list[Selection]:
    n = rec.x1.shape[0]
    return [Selection(i, p, s) for i in range(n) for p, s in schedule(iteration, sampling)]


def source_codes(rec: GenerationRecord) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    """(prototype, style) per source; translated images use their re-encoded codes."""
    return {
        "x1": (rec.codes1.prototype, rec.codes1.style),
        "x2": (rec.codes2.prototype, rec.codes2.style),
        "x12": (rec.recode12.prototype, rec.recode12.style),
        "x21": (rec.recode21.prototype, rec.recode21.style),
    }


def gather_features(rec: GenerationRecord, selections: list[Selection], labels: torch.Tensor,
                    params: HFL):
    """Build the feature set F for the selections; returns (f, logits, labels)."""
    codes = source_codes(rec)
    protos, styles, ys = [], [], []
    for sel in selections:
        p = codes[sel.proto_source][0][sel.identity]
        s = codes[sel.style_source][1][sel.identity]
        protos.append(p)
        styles.append(s)
        ys.append(labels[sel.identity])
    f, logits = params(torch.stack(protos), torch.stack(styles))
    return f, logits, torch.stack(ys)


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood; ``labels`` are zero-based class indices."""
    n = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range for {n} classes")
    return F.cross_entropy(logits, labels)


def euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d2 = (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)
    return d2.clamp_min(1e-12).sqrt()


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float) -> torch.Tensor:
    """Batch-hard triplet loss averaged over anchors.

    For each anchor, the farthest same-identity sample (itself excluded) and
    the nearest other-identity sample are used; ties go to the lowest index.
    Anchors whose identity occurs only once contribute nothing.
    """
    if torch.unique(labels).numel() < 2:
        raise ValueError("triplet loss needs at least two identities")
    n = features.shape[0]
    d = euclidean(features, features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool)
    pos_mask = same & ~eye
    has_pos = pos_mask.any(1)
    if not has_pos.any():
        raise ValueError("triplet loss needs an identity with at least two samples")
    neg_inf = torch.finfo(d.dtype).min
    pos_idx = torch.where(pos_mask, d, torch.full_like(d, neg_inf)).argmax(1)
    neg_idx = torch.where(~same, d, torch.full_like(d, torch.finfo(d.dtype).max)).argmin(1)
    rows = torch.arange(n)
    hinge = F.relu(d[rows, pos_idx] - d[rows, neg_idx] + margin)
    return hinge[has_pos].mean()


@torch.no_grad()
def extract_features(gen, params: HFL, images, batch_size: int = 64) -> torch.Tensor:
    """Retrieval features f for a list of ImageTensor (any mix of modalities)."""
    from .types import to_batch

    gen.eval()
    params.eval()
    dtype = next(gen.parameters()).dtype
    out = torch.empty(len(images), params.fc.out_features, dtype=dtype)
    for modality in (1, 2):
        pos = [i for i, im in enumerate(images) if im.modality == modality]
        for start in range(0, len(pos), batch_size):
            chunk = pos[start:start + batch_size]
            x = to_batch([images[i] for i in chunk], dtype)
            proto = gen.encode_prototype(x, modality)
            style, _, _ = gen.encode_attribute(x, modality)
            out[chunk] = params(proto, style)[0]
    return out
