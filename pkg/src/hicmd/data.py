"""Dataset indexing, the procedural two-modality dataset, and pair sampling.

Folder layout::

    <root>/<split>/<identity>/<modality>/<image files>

with ``split`` in {train, query, gallery} and ``modality`` in
{visible, infrared}. Images are 8-bit files rescaled to [-1, 1] on load.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .types import INFRARED, MODALITY_NAMES, VISIBLE, ImageTensor, PairBatch

SPLITS = ("train", "query", "gallery")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
_MODALITY_BY_NAME = {v: k for k, v in MODALITY_NAMES.items()}
FACTOR_COLUMNS = ["image_id", "identity", "modality", "template", "stripes", "offset",
                  "angle", "palette"]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Record:
    identity: int  # contiguous label, 1..N
    modality: int
    split: str
    name: str  # identity folder name
    path: str | None = None  # file path, or relative image id for synthetic data
    pixels: np.ndarray | None = None  # uint8 (H, W, 3) for in-memory data


@dataclass(frozen=True, eq=False)
class DatasetIndex:
    records: tuple[Record, ...]
    num_identities: int
    splits: tuple[str, ...]
    _groups: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> "DatasetIndex":
        recs = tuple(r for r in self.records if r.split == split)
        return DatasetIndex(recs, self.num_identities, (split,))

    def groups(self) -> dict[int, dict[int, list[int]]]:
        """identity -> modality -> record positions."""
        if not self._groups:
            for i, r in enumerate(self.records):
                self._groups.setdefault(r.identity, {VISIBLE: [], INFRARED: []})[r.modality].append(i)
        return self._groups

    def identities(self) -> list[int]:
        return sorted(self.groups())


def _validate(index: DatasetIndex) -> DatasetIndex:
    labels = sorted({r.identity for r in index.records})
    if labels != list(range(1, len(labels) + 1)):
        raise DatasetError("identity labels are not contiguous 1..N")
    train = index.subset("train") if "train" in index.splits else None
    if train is not None:
        for y, mods in train.groups().items():
            for m in (VISIBLE, INFRARED):
                if not mods[m]:
                    name = next(train.records[i].name for ms in mods.values() for i in ms)
                    raise DatasetError(
                        f"training identity {name!r} has no {MODALITY_NAMES[m]} images")
    return index


def index_folder(root: str | Path, splits: Sequence[str] = ("train",)) -> DatasetIndex:
    """Index the requested splits; labels run 1..N over their identity union."""
    root = Path(root)
    found: list[tuple[str, str, int, Path]] = []
    for split in splits:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        split_dir = root / split
        if not split_dir.is_dir():
            raise DatasetError(f"missing split directory {split_dir}")
        for ident in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            for mod_dir in sorted(p for p in ident.iterdir() if p.is_dir()):
                if mod_dir.name not in _MODALITY_BY_NAME:
                    raise DatasetError(f"unknown modality folder {mod_dir}")
                for f in sorted(mod_dir.iterdir()):
                    if f.suffix.lower() in IMAGE_SUFFIXES:
                        found.append((split, ident.name, _MODALITY_BY_NAME[mod_dir.name], f))
            if split == "train":
                present = {p.name for p in ident.iterdir() if p.is_dir()}
                for m in MODALITY_NAMES.values():
                    if m not in present:
                        raise DatasetError(f"training identity {ident.name!r} lacks {m}/")
    names = sorted({n for _, n, _, _ in found})
    label = {n: i + 1 for i, n in enumerate(names)}
    recs = tuple(Record(label[n], m, s, n, str(f)) for s, n, m, f in found)
    return _validate(DatasetIndex(recs, len(names), tuple(splits)))


def _to_image(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    if arr.shape[:2] != (height, width):
        arr = np.asarray(Image.fromarray(arr).resize((width, height), Image.BILINEAR))
    return arr.astype(np.float32) / 127.5 - 1.0


def load_image(record: Record, height: int, width: int) -> ImageTensor:
    if record.pixels is not None:
        arr = record.pixels
    else:
        try:
            with Image.open(record.path) as im:
                arr = np.asarray(im.convert("RGB"))
        except OSError as e:
            raise DatasetError(f"unreadable image {record.path}: {e}") from e
    return ImageTensor(_to_image(arr, height, width), record.modality, record.identity)


def load_images(index: DatasetIndex, height: int, width: int) -> list[ImageTensor]:
    return [load_image(r, height, width) for r in index.records]


def sample_pair_batch(index: DatasetIndex, rng: np.random.Generator, n_pairs: int = 4,
                      images: Sequence[ImageTensor] | None = None,
                      size: tuple[int, int] = (64, 32)) -> PairBatch:
    """Pick ``n_pairs`` distinct identities, then one visible and one infrared
    image of each, all uniformly."""
    groups = index.groups()
    ids = sorted(y for y, g in groups.items() if g[VISIBLE] and g[INFRARED])
    if len(ids) < n_pairs:
        raise DatasetError(f"need at least {n_pairs} identities with both modalities, "
                           f"found {len(ids)}")
    chosen = rng.choice(len(ids), size=n_pairs, replace=False)
    vis, ir, ys = [], [], []
    for c in chosen:
        y = ids[int(c)]
        iv = groups[y][VISIBLE][int(rng.integers(len(groups[y][VISIBLE])))]
        ii = groups[y][INFRARED][int(rng.integers(len(groups[y][INFRARED])))]
        for pos, out in ((iv, vis), (ii, ir)):
            out.append(images[pos] if images is not None else load_image(index.records[pos], *size))
        ys.append(y)
    return PairBatch(tuple(vis), tuple(ir), tuple(ys))


# synthetic data -------------------------------------------------------------

# per-palette channel gains for visible images; none depends on identity
VISIBLE_PALETTES = (
    (1.00, 0.62, 0.40),
    (0.42, 0.70, 1.00),
    (0.55, 1.00, 0.50),
    (0.95, 0.90, 0.35),
)
INFRARED_TINT = (0.92, 0.92, 1.00)
INFRARED_PALETTE = -1


@dataclass(frozen=True)
class SyntheticSpec:
    identities: int = 20
    poses: int = 10
    height: int = 64
    width: int = 32
    templates: int = 5
    stripe_patterns: int = 4
    test_poses: int = 5  # last poses of each identity go to query/gallery
    noise: float = 0.08
    max_offset: float = 4.0  # pixels at width 32
    max_angle: float = 30.0  # degrees

    def __post_init__(self):
        if self.identities < 1 or self.poses < 1:
            raise DatasetError("identities and poses must be positive")
        if not 0 <= self.test_poses < self.poses:
            raise DatasetError("test_poses must leave at least one training pose")
        if self.stripe_patterns > len(STRIPE_NAMES):
            raise DatasetError(f"at most {len(STRIPE_NAMES)} stripe patterns exist")


STRIPE_NAMES = ("horizontal", "vertical", "checker", "diagonal", "wide-horizontal", "plain")


def identity_factors(spec: SyntheticSpec) -> list[tuple[int, int]]:
    """(template, stripes) per identity; every identity gets a distinct pair."""
    if spec.identities > spec.templates * spec.stripe_patterns:
        raise DatasetError(
            f"{spec.identities} identities need distinct factors but only "
            f"{spec.templates} x {spec.stripe_patterns} combinations exist")
    return [(i % spec.templates, (i // spec.templates) % spec.stripe_patterns)
            for i in range(spec.identities)]


def _stripes(pattern: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    name = STRIPE_NAMES[pattern]
    if name == "horizontal":
        return (np.floor(yy / 3) % 2).astype(float)
    if name == "vertical":
        return (np.floor(xx / 3) % 2).astype(float)
    if name == "checker":
        return ((np.floor(yy / 4) + np.floor(xx / 4)) % 2).astype(float)
    if name == "diagonal":
        return (np.floor((xx + yy) / 3) % 2).astype(float)
    if name == "wide-horizontal":
        return (np.floor(yy / 7) % 2).astype(float)
    return np.full_like(yy, 0.5, dtype=float)


def _bar(yy, xx, y0, x0, length, thickness, angle):
    """Mask of a bar hanging down from (y0, x0), rotated by ``angle`` radians."""
    dy, dx = yy - y0, xx - x0
    along = dy * math.cos(angle) + dx * math.sin(angle)
    across = -dy * math.sin(angle) + dx * math.cos(angle)
    return (along >= 0) & (along <= length) & (np.abs(across) <= thickness / 2)


def render_intensity(template: int, stripes: int, offset: float, angle: float,
                     height: int, width: int, noise: np.ndarray | None = None) -> np.ndarray:
    """Palette-free intensity image in [0, 1].

    Geometry is laid out on a 64 x 32 canvas and scaled to (height, width).
    """
    sy, sx = height / 64.0, width / 32.0
    yy, xx = np.meshgrid(np.arange(height) / sy, np.arange(width) / sx, indexing="ij")
    xx = xx - offset
    # template controls build: torso half-width, torso length, head radius
    torso_hw = 4.0 + 1.1 * template
    torso_top, torso_len = 13.0, 18.0 + 1.5 * (template % 3)
    head_r = 4.6 - 0.35 * (template % 4)
    cx = 16.0
    img = np.full((height, width), 0.12)
    head = (yy - (torso_top - head_r - 0.5)) ** 2 + (xx - cx) ** 2 <= head_r ** 2
    torso = (np.abs(xx - cx) <= torso_hw) & (yy >= torso_top) & (yy <= torso_top + torso_len)
    a = math.radians(angle)
    hip = torso_top + torso_len
    leg_len = 60.0 - hip
    legs = (_bar(yy, xx, hip, cx - 2.2, leg_len, 3.2, a)
            | _bar(yy, xx, hip, cx + 2.2, leg_len, 3.2, -a))
    arms = (_bar(yy, xx, torso_top + 1, cx - torso_hw - 1.2, 14.0, 2.4, -0.6 * a + 0.15)
            | _bar(yy, xx, torso_top + 1, cx + torso_hw + 1.2, 14.0, 2.4, 0.6 * a - 0.15))
    img[legs | arms] = 0.45
    pattern = _stripes(stripes, yy - torso_top, xx - cx)
    img[torso] = 0.35 + 0.55 * pattern[torso]
    img[head] = 0.7
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def apply_palette(intensity: np.ndarray, palette: int) -> np.ndarray:
    """Intensity -> RGB in [0, 1]. Visible palettes scale channels; the
    infrared palette collapses to a gamma-lifted luminance with a fixed tint."""
    if palette == INFRARED_PALETTE:
        return np.sqrt(intensity)[..., None] * np.asarray(INFRARED_TINT)
    return intensity[..., None] * np.asarray(VISIBLE_PALETTES[palette])


def invert_palette(rgb: np.ndarray, palette: int) -> np.ndarray:
    if palette == INFRARED_PALETTE:
        return (rgb / np.asarray(INFRARED_TINT)).mean(-1) ** 2
    return (rgb / np.asarray(VISIBLE_PALETTES[palette])).mean(-1)


def modality_of_palette(palette: int) -> int:
    return INFRARED if palette == INFRARED_PALETTE else VISIBLE


@dataclass(frozen=True)
class Factors:
    image_id: str
    identity: int
    modality: int
    template: int
    stripes: int
    offset: float
    angle: float
    palette: int
    pose_index: int = 0

    def row(self) -> list:
        return [self.image_id, self.identity, MODALITY_NAMES[self.modality], self.template,
                self.stripes, repr(self.offset), repr(self.angle), self.palette]


def make_synthetic(spec: SyntheticSpec, seed: int) -> tuple[DatasetIndex, list[Factors]]:
    """Render the dataset in memory; returns the index and per-image factors."""
    rng = np.random.default_rng(seed)
    id_factors = identity_factors(spec)
    n_train = spec.poses - spec.test_poses
    recs, factors = [], []
    for i, (template, stripes) in enumerate(id_factors):
        name = f"{i + 1:04d}"
        offsets = rng.uniform(-spec.max_offset, spec.max_offset, spec.poses) * spec.width / 32
        angles = rng.uniform(-spec.max_angle, spec.max_angle, spec.poses)
        for j in range(spec.poses):
            # noise is shared by both modalities of one pose
            noise = rng.normal(0.0, spec.noise, (spec.height, spec.width))
            base = render_intensity(template, stripes, offsets[j] * 32 / spec.width, angles[j],
                                    spec.height, spec.width, noise)
            for modality in (VISIBLE, INFRARED):
                palette = (int(rng.integers(len(VISIBLE_PALETTES))) if modality == VISIBLE
                           else INFRARED_PALETTE)
                if j < n_train:
                    split = "train"
                else:
                    split = "query" if modality == INFRARED else "gallery"
                image_id = f"{split}/{name}/{MODALITY_NAMES[modality]}/p{j:02d}.png"
                pixels = np.round(apply_palette(base, palette) * 255).astype(np.uint8)
                recs.append(Record(i + 1, modality, split, name, image_id, pixels))
                factors.append(Factors(image_id, i + 1, modality, template, stripes,
                                       float(offsets[j]), float(angles[j]), palette, j))
    index = DatasetIndex(tuple(recs), spec.identities, SPLITS)
    return _validate(index), factors


def write_dataset(index: DatasetIndex, factors: Iterable[Factors], out: str | Path) -> int:
    """Write PNG tree plus ``factors.csv``; returns the number of images."""
    out = Path(out)
    n = 0
    for r in index.records:
        path = out / r.path
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(r.pixels).save(path, optimize=False)
        n += 1
    with open(out / "factors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FACTOR_COLUMNS)
        for f in factors:
            w.writerow(f.row())
    return n


def read_factors(path: str | Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {row["image_id"]: row for row in csv.DictReader(fh)}
