"""Factor-swap grids and ID-excluded interpolation strips."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .networks import Generator, interpolate_excluded
from .types import MODALITY_NAMES, CodeBundle, ImageTensor, to_batch, to_pixels

MODES = ("swap-excluded", "swap-discriminative", "swap-illum")


@torch.no_grad()
def encode_images(gen: Generator, images: Sequence[ImageTensor]) -> list[CodeBundle]:
    gen.eval()
    return [gen.encode(to_batch([im], gen.dtype), im.modality) for im in images]


def swap_codes(row: CodeBundle, col: CodeBundle, mode: str) -> CodeBundle:
    """Codes for the cell at (input ``row``, reference ``col``)."""
    if mode == "swap-excluded":
        return CodeBundle(row.prototype, row.style, col.illumination, col.pose)
    if mode == "swap-discriminative":
        return CodeBundle(col.prototype, col.style, row.illumination, row.pose)
    if mode == "swap-illum":
        return CodeBundle(row.prototype, row.style, col.illumination, row.pose)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@torch.no_grad()
def swap_grid(gen: Generator, inputs: Sequence[ImageTensor], references: Sequence[ImageTensor],
              mode: str) -> np.ndarray:
    """Generated cells as an array (rows, cols, H, W, 3) in [-1, 1]."""
    rows = encode_images(gen, inputs)
    cols = encode_images(gen, references)
    cells = []
    for r in rows:
        out = []
        for c in cols:
            out.append(to_pixels(gen.decode_bundle(swap_codes(r, c, mode)))[0])
        cells.append(out)
    return np.asarray(cells)


@torch.no_grad()
def interpolation_strip(gen: Generator, a: ImageTensor, b: ImageTensor, steps: int) -> np.ndarray:
    """G(p_a, a^s_a, lerp(a^ex_a, a^ex_b, t)) for evenly spaced t in [0, 1]."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    ca, cb = encode_images(gen, [a, b])
    frames = []
    for t in np.linspace(0.0, 1.0, steps):
        ex = interpolate_excluded(ca, cb, float(t))
        frames.append(to_pixels(gen.decode_bundle(ca.with_excluded(ex)))[0])
    return np.asarray(frames)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round((np.clip(pixels, -1, 1) + 1) * 127.5).astype(np.uint8)


def compose_grid(cells: np.ndarray, inputs: Sequence[ImageTensor],
                 references: Sequence[ImageTensor]) -> np.ndarray:
    """(rows + 1) x (cols + 1) tiles: references across the top strip, inputs
    down the left strip, blank corner."""
    n_rows, n_cols, h, w, _ = cells.shape
    canvas = np.zeros(((n_rows + 1) * h, (n_cols + 1) * w, 3), dtype=np.uint8)
    for j, ref in enumerate(references):
        canvas[:h, (j + 1) * w:(j + 2) * w] = to_uint8(ref.pixels)
    for i, inp in enumerate(inputs):
        canvas[(i + 1) * h:(i + 2) * h, :w] = to_uint8(inp.pixels)
        for j in range(n_cols):
            canvas[(i + 1) * h:(i + 2) * h, (j + 1) * w:(j + 2) * w] = to_uint8(cells[i, j])
    return canvas


def compose_strip(frames: np.ndarray) -> np.ndarray:
    return np.concatenate([to_uint8(f) for f in frames], axis=1)


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image).save(path, optimize=False)


def write_manifest(path: str | Path, input_ids: Sequence[str], reference_ids: Sequence[str],
                   inputs: Sequence[ImageTensor], references: Sequence[ImageTensor]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "input_id", "reference_id", "input_identity",
                    "reference_identity", "input_modality", "reference_modality"])
        for i, (iid, inp) in enumerate(zip(input_ids, inputs)):
            for j, (rid, ref) in enumerate(zip(reference_ids, references)):
                w.writerow([i + 1, j + 1, iid, rid, inp.identity, ref.identity,
                            MODALITY_NAMES[inp.modality], MODALITY_NAMES[ref.modality]])
