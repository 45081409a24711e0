"""Generation-side objectives and the loss report.

Every pixel/code distance is the mean absolute deviation per element, so the
default weights do not depend on resolution. Each exported loss returns the
sum of the modality-1 term and its modality-2 mirror.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import torch

from .config import RunConfig
from .networks import Discriminators, GenerationRecord
from .types import INFRARED, VISIBLE, CodeBundle

EPS = 1e-6


def mean_abs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cross_recon_loss(rec: GenerationRecord) -> torch.Tensor:
    return mean_abs(rec.x1, rec.x21) + mean_abs(rec.x2, rec.x12)


def same_recon_loss(rec: GenerationRecord) -> torch.Tensor:
    return mean_abs(rec.x1, rec.same1) + mean_abs(rec.x2, rec.same2)


def cycle_recon_loss(rec: GenerationRecord) -> torch.Tensor:
    if rec.recode12 is None or rec.recode21 is None:
        raise ValueError("record has no re-encoded codes")
    return mean_abs(rec.x1, rec.cycle1) + mean_abs(rec.x2, rec.cycle2)


def code_recon_loss(rec: GenerationRecord) -> torch.Tensor:
    # style of x_1 survives the trip through x12; ID-excluded codes of x_1
    # survive the trip through x21
    c1, c2, r12, r21 = rec.codes1, rec.codes2, rec.recode12, rec.recode21
    return (mean_abs(c1.style, r12.style) + mean_abs(c1.id_excluded(), r21.id_excluded())
            + mean_abs(c2.style, r21.style) + mean_abs(c2.id_excluded(), r12.id_excluded()))


def weighted_recon(cross, same, cycle, code, cfg: RunConfig):
    return (cfg.lambda_cross * cross + cfg.lambda_same * same
            + cfg.lambda_cycle * cycle + cfg.lambda_code * code)


def recon_total(rec: GenerationRecord, cfg: RunConfig) -> torch.Tensor:
    return weighted_recon(cross_recon_loss(rec), same_recon_loss(rec),
                          cycle_recon_loss(rec), code_recon_loss(rec), cfg)


def kl_loss(bundle1: CodeBundle, bundle2: CodeBundle) -> torch.Tensor:
    """KL(N(a^ex, I) || N(0, I)) = 0.5 * ||a^ex||^2, averaged over the batch,
    summed over the two modalities."""
    total = 0.0
    for b in (bundle1, bundle2):
        ex = b.id_excluded()
        total = total + 0.5 * ex.pow(2).sum(dim=1).mean()
    return total


def _clamped(p: torch.Tensor) -> torch.Tensor:
    if not torch.all((p >= 0) & (p <= 1)):
        raise ValueError("discriminator output outside [0, 1]")
    return p.clamp(EPS, 1 - EPS)


def adv_generator_terms(fake_scores, variant: str) -> torch.Tensor:
    """Sum of generator terms over a list of D(fake) tensors."""
    total = 0.0
    for p in fake_scores:
        p = _clamped(p)
        if variant == "minimax":
            total = total + torch.log1p(-p).mean()
        elif variant == "non-saturating":
            total = total - torch.log(p).mean()
        else:
            raise ValueError(f"unknown adversarial variant {variant!r}")
    return total


def adv_generator_loss(rec: GenerationRecord, dis: Discriminators, cfg: RunConfig) -> torch.Tensor:
    scores = []
    for m in (VISIBLE, INFRARED):
        scores += [dis(fake, m) for fake in rec.fakes(m)]
    return adv_generator_terms(scores, cfg.adv_variant)


def adv_discriminator_terms(real_scores, fake_scores) -> torch.Tensor:
    total = 0.0
    for p in real_scores:
        total = total - torch.log(_clamped(p)).mean()
    for p in fake_scores:
        total = total - torch.log1p(-_clamped(p)).mean()
    return total


def adv_discriminator_loss(rec: GenerationRecord, dis: Discriminators) -> torch.Tensor:
    """Negated minimax objective; generated images are detached."""
    real, fake = [], []
    for m in (VISIBLE, INFRARED):
        real.append(dis(rec.real(m).detach(), m))
        fake += [dis(f.detach(), m) for f in rec.fakes(m)]
    return adv_discriminator_terms(real, fake)


@dataclass
class LossReport:
    recon_cross: float
    recon_same: float
    recon_cycle: float
    recon_code: float
    kl: float
    adv_gen: float
    adv_dis: float
    ce: float
    trip: float
    total: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite loss component {f.name}={v}")

    def check_total(self, cfg: RunConfig, rel: float = 1e-6) -> bool:
        expected = total_loss(self, cfg)
        return abs(expected - self.total) <= rel * max(1.0, abs(expected))


def total_loss(parts, cfg: RunConfig):
    """Overall generator-side objective from components (tensors or floats)."""
    get = (lambda k: getattr(parts, k)) if not isinstance(parts, dict) else parts.__getitem__
    return (weighted_recon(get("recon_cross"), get("recon_same"), get("recon_cycle"),
                           get("recon_code"), cfg)
            + cfg.lambda_kl * get("kl") + cfg.lambda_adv * get("adv_gen")
            + cfg.lambda_ce * get("ce") + cfg.lambda_trip * get("trip"))


CSV_COLUMNS = ["iteration"] + [f.name for f in fields(LossReport)]


def format_row(iteration: int, report: LossReport) -> list[str]:
    return [str(iteration)] + [repr(float(v)) for v in asdict(report).values()]


class LossLog:
    """Appends one CSV row per iteration."""

    def __init__(self, path, append: bool = False):
        self.path = path
        new = not append
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._writer.writerow(CSV_COLUMNS)

    def write(self, iteration: int, report: LossReport) -> None:
        self._writer.writerow(format_row(iteration, report))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_csv(path) -> list[tuple[int, LossReport]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r.pop("iteration")), LossReport(**{k: float(v) for k, v in r.items()}))
            for r in rows]
