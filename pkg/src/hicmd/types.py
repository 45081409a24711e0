"""Value objects shared across the package.

Single images are numpy arrays in (H, W, 3) layout with values in [-1, 1].
Codes travel through the networks as batched torch tensors in channels-first
layout, so a :class:`CodeBundle` holds ``prototype`` as (B, c_p, h, w) and the
three attribute parts as (B, d).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch

from .config import RunConfig

VISIBLE = 1
INFRARED = 2
MODALITIES = (VISIBLE, INFRARED)
MODALITY_NAMES = {VISIBLE: "visible", INFRARED: "infrared"}


def _array_to_json(a: np.ndarray) -> dict[str, Any]:
    return {"dtype": str(a.dtype), "shape": list(a.shape), "data": a.ravel().tolist()}


def _array_from_json(d: dict[str, Any]) -> np.ndarray:
    return np.asarray(d["data"], dtype=d["dtype"]).reshape(d["shape"])


@dataclass(frozen=True, eq=False)
class ImageTensor:
    pixels: np.ndarray
    modality: int
    identity: int

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must have shape (H, W, 3), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < -1 or px.max() > 1:
            raise ValueError("pixel values must be finite and within [-1, 1]")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be 1 or 2, got {self.modality}")
        if self.identity < 1:
            raise ValueError(f"identity labels start at 1, got {self.identity}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def check_shape(self, cfg: RunConfig) -> None:
        if self.shape != (cfg.height, cfg.width):
            raise ValueError(f"image is {self.shape}, configured {(cfg.height, cfg.width)}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return (self.modality == other.modality and self.identity == other.identity
                and self.pixels.dtype == other.pixels.dtype
                and np.array_equal(self.pixels, other.pixels))

    def to_json(self) -> dict[str, Any]:
        return {"pixels": _array_to_json(self.pixels), "modality": self.modality,
                "identity": self.identity}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ImageTensor":
        return cls(_array_from_json(d["pixels"]), int(d["modality"]), int(d["identity"]))


def to_batch(images: Sequence[ImageTensor], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack images into a (B, 3, H, W) tensor."""
    arr = np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def to_pixels(batch: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_batch` for raw pixel data: (B, 3, H, W) -> (B, H, W, 3)."""
    return batch.detach().cpu().numpy().transpose(0, 2, 3, 1)


@dataclass(frozen=True, eq=False)
class CodeBundle:
    """Hierarchical codes for a batch of images of one modality."""

    prototype: torch.Tensor
    style: torch.Tensor
    illumination: torch.Tensor
    pose: torch.Tensor

    def id_excluded(self) -> torch.Tensor:
        return torch.cat([self.illumination, self.pose], dim=1)

    def attribute(self) -> torch.Tensor:
        return torch.cat([self.style, self.illumination, self.pose], dim=1)

    def with_excluded(self, excluded: torch.Tensor) -> "CodeBundle":
        d_c = self.illumination.shape[1]
        return CodeBundle(self.prototype, self.style, excluded[:, :d_c], excluded[:, d_c:])

    def check(self, cfg: RunConfig) -> None:
        h, w, c = cfg.proto_shape
        if tuple(self.prototype.shape[1:]) != (c, h, w):
            raise ValueError(f"prototype shape {tuple(self.prototype.shape[1:])} != {(c, h, w)}")
        for name, dim in (("style", cfg.style_dim), ("illumination", cfg.illum_dim),
                          ("pose", cfg.pose_dim)):
            t = getattr(self, name)
            if t.ndim != 2 or t.shape[1] != dim:
                raise ValueError(f"{name} code has shape {tuple(t.shape)}, expected (B, {dim})")

    def detach(self) -> "CodeBundle":
        return CodeBundle(*(t.detach() for t in
                            (self.prototype, self.style, self.illumination, self.pose)))

    def __getitem__(self, idx) -> "CodeBundle":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return CodeBundle(self.prototype[idx], self.style[idx], self.illumination[idx],
                          self.pose[idx])

    def __len__(self) -> int:
        return self.prototype.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CodeBundle):
            return NotImplemented
        return all(a.dtype == b.dtype and torch.equal(a, b) for a, b in zip(
            (self.prototype, self.style, self.illumination, self.pose),
            (other.prototype, other.style, other.illumination, other.pose)))

    def to_json(self) -> dict[str, Any]:
        return {k: _array_to_json(getattr(self, k).detach().cpu().numpy())
                for k in ("prototype", "style", "illumination", "pose")}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CodeBundle":
        return cls(**{k: torch.from_numpy(_array_from_json(d[k]))
                      for k in ("prototype", "style", "illumination", "pose")})


def swap_excluded(a: CodeBundle, b: CodeBundle) -> tuple[CodeBundle, CodeBundle]:
    """Exchange the illumination and pose codes of two bundles."""
    return a.with_excluded(b.id_excluded()), b.with_excluded(a.id_excluded())


@dataclass(frozen=True, eq=False)
class PairBatch:
    visible: tuple[ImageTensor, ...]
    infrared: tuple[ImageTensor, ...]
    identities: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "visible", tuple(self.visible))
        object.__setattr__(self, "infrared", tuple(self.infrared))
        object.__setattr__(self, "identities", tuple(int(i) for i in self.identities))
        if not (len(self.visible) == len(self.infrared) == len(self.identities)):
            raise ValueError("visible, infrared and identities must have equal length")
        if len(set(self.identities)) != len(self.identities):
            raise ValueError(f"duplicate identities in batch: {self.identities}")
        for v, r, y in zip(self.visible, self.infrared, self.identities):
            if v.modality != VISIBLE or r.modality != INFRARED:
                raise ValueError("pair must be (visible, infrared)")
            if v.identity != y or r.identity != y:
                raise ValueError(f"pair labels ({v.identity}, {r.identity}) do not match {y}")

    def __len__(self) -> int:
        return len(self.identities)

    def tensors(self, dtype: torch.dtype = torch.float32):
        """(x_visible, x_infrared, zero-based labels)."""
        labels = torch.tensor([y - 1 for y in self.identities], dtype=torch.long)
        return to_batch(self.visible, dtype), to_batch(self.infrared, dtype), labels

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PairBatch):
            return NotImplemented
        return (self.visible == other.visible and self.infrared == other.infrared
                and self.identities == other.identities)

    def to_json(self) -> dict[str, Any]:
        return {"visible": [im.to_json() for im in self.visible],
                "infrared": [im.to_json() for im in self.infrared],
                "identities": list(self.identities)}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "PairBatch":
        return cls(tuple(ImageTensor.from_json(x) for x in d["visible"]),
                   tuple(ImageTensor.from_json(x) for x in d["infrared"]),
                   tuple(d["identities"]))
