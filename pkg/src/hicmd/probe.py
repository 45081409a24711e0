"""Stripe-pattern probe: a small classifier trained on ground-truth synthetic
factors, used to check that generated images keep the identity pattern."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SyntheticSpec, make_synthetic


class StripeProbe(nn.Module):
    def __init__(self, n_patterns: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, 2, 1), nn.ReLU(),
        )
        self.fc = nn.Linear(32, n_patterns)

    def forward(self, x):
        return self.fc(self.net(x).mean(dim=(2, 3)))

    @torch.no_grad()
    def predict(self, pixels: np.ndarray) -> np.ndarray:
        """Pattern index per image for an (N, H, W, 3) array in [-1, 1]."""
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2))).float()
        return self(x).argmax(1).numpy()


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # generated images are softer and noisier than renders
    blur = torch.rand(x.shape[0], 1, 1, 1, generator=gen) < 0.5
    soft = F.avg_pool2d(x, 3, 1, 1, count_include_pad=False)
    x = torch.where(blur, soft, x)
    return (x + 0.05 * torch.randn(x.shape, generator=gen)).clamp(-1, 1)


def train_probe(spec: SyntheticSpec, seed: int = 0, steps: int = 600,
                batch: int = 64) -> tuple[StripeProbe, float]:
    """Fit on a freshly rendered set; returns the probe and its training accuracy."""
    spec = SyntheticSpec(**{**spec.__dict__, "test_poses": 0})
    index, factors = make_synthetic(spec, seed)
    x = torch.from_numpy(np.stack([r.pixels for r in index.records]).transpose(0, 3, 1, 2))
    x = x.float() / 127.5 - 1
    y = torch.tensor([f.stripes for f in factors])
    torch.manual_seed(seed)
    probe = StripeProbe(spec.stripe_patterns)
    opt = torch.optim.Adam(probe.parameters(), lr=2e-3)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(len(y), (batch,), generator=gen)
        loss = F.cross_entropy(probe(_augment(x[idx], gen)), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    acc = float((probe.predict(x.numpy().transpose(0, 2, 3, 1)) == y.numpy()).mean())
    return probe, acc
