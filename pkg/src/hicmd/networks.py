"""Generation networks: per-modality prototype/attribute encoders, the shared
decoder, and the per-modality discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .types import INFRARED, VISIBLE, CodeBundle, ImageTensor, to_batch


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, norm="none", activation="relu"):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding)
        self.norm = nn.InstanceNorm2d(out_ch) if norm == "in" else None
        self.activation = {
            "relu": nn.ReLU(),
            "lrelu": nn.LeakyReLU(0.2),
            "none": None,
        }[activation]

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.activation is not None:
            x = self.activation(x)
        return x


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            ConvBlock(ch, ch, 3, 1, 1, norm="in", activation="relu"),
            ConvBlock(ch, ch, 3, 1, 1, norm="in", activation="none"),
        )

    def forward(self, x):
        return x + self.body(x)


class PrototypeEncoder(nn.Module):
    """Downsampling conv stack + residual blocks -> spatial prototype tensor."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        ch = cfg.base_channels
        layers = [ConvBlock(3, ch, 3, 1, 1, norm="in")]
        for _ in range(cfg.n_downsample):
            layers.append(ConvBlock(ch, ch * 2, 4, 2, 1, norm="in"))
            ch *= 2
        if ch != cfg.proto_channels:
            layers.append(ConvBlock(ch, cfg.proto_channels, 1, norm="in"))
        layers += [ResBlock(cfg.proto_channels) for _ in range(cfg.n_res)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class AttributeEncoder(nn.Module):
    """Downsampling conv stack + global pooling + linear head -> one attribute
    vector, later split into style / illumination / pose."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        ch = cfg.base_channels
        layers = [ConvBlock(3, ch, 3, 1, 1)]
        for _ in range(cfg.n_downsample):
            layers.append(ConvBlock(ch, ch * 2, 4, 2, 1))
            ch *= 2
        self.model = nn.Sequential(*layers)
        self.fc = nn.Linear(ch, cfg.attr_dim)

    def forward(self, x):
        h = self.model(x).mean(dim=(2, 3))
        return self.fc(h)


def adain(x, gamma, beta):
    """Instance normalisation with externally supplied affine parameters."""
    return F.instance_norm(x) * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


class AdaResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.norm_channels = (ch, ch)

    def forward(self, x, affine):
        (g1, b1), (g2, b2) = affine
        h = F.relu(adain(self.conv1(x), g1, b1))
        return x + adain(self.conv2(h), g2, b2)


class UpBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.norm_channels = (out_ch,)

    def forward(self, x, affine):
        ((g, b),) = affine
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(adain(self.conv(x), g, b))


class Decoder(nn.Module):
    """Shared decoder G(p, a^s, a^c, a^p).

    The prototype tensor is consumed spatially; the concatenated attribute
    vector drives every normalisation layer through an MLP.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        ch = cfg.proto_channels
        layers = [AdaResBlock(ch) for _ in range(cfg.n_res)]
        for _ in range(cfg.n_downsample):
            out = max(ch // 2, 4)
            layers.append(UpBlock(ch, out))
            ch = out
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv2d(ch, 3, 3, 1, 1)
        n_params = sum(2 * c for layer in layers for c in layer.norm_channels)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.attr_dim, cfg.mlp_dim), nn.ReLU(),
            nn.Linear(cfg.mlp_dim, cfg.mlp_dim), nn.ReLU(),
            nn.Linear(cfg.mlp_dim, n_params),
        )

    def forward(self, proto, attr):
        params = self.mlp(attr)
        x, i = proto, 0
        for layer in self.layers:
            affine = []
            for c in layer.norm_channels:
                affine.append((params[:, i:i + c], params[:, i + c:i + 2 * c]))
                i += 2 * c
            x = layer(x, affine)
        return torch.tanh(self.out(x))


class Discriminator(nn.Module):
    """Strided conv stack ending in a sigmoid score (scalar, or per patch)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        ch = cfg.dis_channels
        layers = [ConvBlock(3, ch, 4, 2, 1, activation="lrelu")]
        for _ in range(cfg.dis_layers - 1):
            layers.append(ConvBlock(ch, ch * 2, 4, 2, 1, activation="lrelu"))
            ch *= 2
        self.features = nn.Sequential(*layers)
        self.patch = cfg.patch_dis
        self.head = nn.Conv2d(ch, 1, 1) if self.patch else nn.Linear(ch, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def logits(self, x):
        h = self.features(x)
        if self.patch:
            return self.head(h).flatten(1)
        return self.head(h.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def _index(modality: int) -> int:
    if modality not in (VISIBLE, INFRARED):
        raise ValueError(f"modality must be 1 or 2, got {modality}")
    return modality - 1


def _as_batch(x, modality: int, dtype) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        if x.modality != modality:
            raise ValueError(f"image has modality {x.modality}, encoder expects {modality}")
        return to_batch([x], dtype)
    return x


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite activations in {what}")
    return t


class Generator(nn.Module):
    """E^p_1, E^p_2, E^a_1, E^a_2 and the shared decoder G."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_proto = nn.ModuleList([PrototypeEncoder(cfg), PrototypeEncoder(cfg)])
        self.enc_attr = nn.ModuleList([AttributeEncoder(cfg), AttributeEncoder(cfg)])
        self.dec = Decoder(cfg)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode_prototype(self, x, modality: int) -> torch.Tensor:
        x = _as_batch(x, modality, self.dtype)
        return _check_finite(self.enc_proto[_index(modality)](x), "prototype encoder")

    def encode_attribute_raw(self, x, modality: int) -> torch.Tensor:
        x = _as_batch(x, modality, self.dtype)
        return _check_finite(self.enc_attr[_index(modality)](x), "attribute encoder")

    def encode_attribute(self, x, modality: int):
        a = self.encode_attribute_raw(x, modality)
        return split_attribute(a, self.cfg)

    def encode(self, x, modality: int) -> CodeBundle:
        s, c, pose = self.encode_attribute(x, modality)
        return CodeBundle(self.encode_prototype(x, modality), s, c, pose)

    def decode(self, proto, style, illum, pose) -> torch.Tensor:
        cfg = self.cfg
        h, w, c = cfg.proto_shape
        if tuple(proto.shape[1:]) != (c, h, w):
            raise ValueError(f"prototype shape {tuple(proto.shape[1:])} != {(c, h, w)}")
        if style.shape[-1] != cfg.style_dim or illum.shape[-1] != cfg.illum_dim \
                or pose.shape[-1] != cfg.pose_dim:
            raise ValueError("attribute code dimensions do not match configuration")
        return self.dec(proto, torch.cat([style, illum, pose], dim=1))

    def decode_bundle(self, b: CodeBundle) -> torch.Tensor:
        return self.decode(b.prototype, b.style, b.illumination, b.pose)


def split_attribute(a: torch.Tensor, cfg: RunConfig):
    """Fixed index partition of the attribute vector into (style, illumination, pose)."""
    if a.shape[-1] != cfg.attr_dim:
        raise ValueError(f"attribute vector has length {a.shape[-1]}, expected {cfg.attr_dim}")
    s, c = cfg.style_dim, cfg.illum_dim
    return a[:, :s], a[:, s:s + c], a[:, s + c:]


class Discriminators(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.nets = nn.ModuleList([Discriminator(cfg), Discriminator(cfg)])
        self.shape = (cfg.height, cfg.width)

    def forward(self, x: torch.Tensor, modality: int) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.shape or x.shape[-3] != 3:
            raise ValueError(f"discriminator expects (B, 3, {self.shape[0]}, {self.shape[1]}), "
                             f"got {tuple(x.shape)}")
        return self.nets[_index(modality)](x)


# module-level API -----------------------------------------------------------

def encode_prototype(x, params: Generator, modality: int) -> torch.Tensor:
    return params.encode_prototype(x, modality)


def encode_attribute(x, params: Generator, modality: int):
    return params.encode_attribute(x, modality)


def decode(proto, style, illum, pose, params: Generator) -> torch.Tensor:
    return params.decode(proto, style, illum, pose)


def discriminate(x, params: Discriminators, modality: int) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        x = to_batch([x], next(params.parameters()).dtype)
    return params(x, modality)


def interpolate_excluded(b_a: CodeBundle, b_b: CodeBundle, t: float) -> torch.Tensor:
    """(1 - t) * a^ex_a + t * a^ex_b."""
    if not 0 <= t <= 1:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    ea, eb = b_a.id_excluded(), b_b.id_excluded()
    if ea.shape[1:] != eb.shape[1:]:
        raise ValueError("bundles have incompatible ID-excluded dimensions")
    if t == 0:
        return ea.clone()
    if t == 1:
        return eb.clone()
    return (1 - t) * ea + t * eb


@dataclass
class GenerationRecord:
    """Everything one generation pass produces for a batch of (x_1, x_2) pairs.

    ``x12`` is G(p_1, a^s_1, a^ex_2) and ``x21`` is G(p_2, a^s_2, a^ex_1).
    ``illum1`` keeps the pose of x_2 but takes the illumination of x_1, so it
    belongs to modality 1 (and ``illum2`` mirrors it). ``recode12`` are the
    modality-2 codes of x12, ``recode21`` the modality-1 codes of x21.
    """

    x1: torch.Tensor
    x2: torch.Tensor
    codes1: CodeBundle
    codes2: CodeBundle
    same1: torch.Tensor
    same2: torch.Tensor
    x12: torch.Tensor
    x21: torch.Tensor
    illum1: torch.Tensor
    illum2: torch.Tensor
    recode12: CodeBundle
    recode21: CodeBundle
    cycle1: torch.Tensor
    cycle2: torch.Tensor

    def fakes(self, modality: int) -> tuple[torch.Tensor, torch.Tensor]:
        """The two cross-constructed images judged by discriminator ``modality``."""
        return (self.x21, self.illum1) if modality == VISIBLE else (self.x12, self.illum2)

    def real(self, modality: int) -> torch.Tensor:
        return self.x1 if modality == VISIBLE else self.x2

    def generated(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in
                ("same1", "same2", "x12", "x21", "illum1", "illum2", "cycle1", "cycle2")}


def forward_generation(x1, x2, params: Generator, labels1=None, labels2=None) -> GenerationRecord:
    """Run the full swap / reconstruct / re-encode / cycle pass.

    ``x1`` holds visible images and ``x2`` infrared images of the same people,
    either as ImageTensor or as (B, 3, H, W) batches.
    """
    if isinstance(x1, ImageTensor) and isinstance(x2, ImageTensor):
        labels1, labels2 = [x1.identity], [x2.identity]
    if labels1 is not None and labels2 is not None and list(labels1) != list(labels2):
        raise ValueError(f"identity mismatch between inputs: {labels1} vs {labels2}")
    G = params
    x1 = _as_batch(x1, VISIBLE, G.dtype)
    x2 = _as_batch(x2, INFRARED, G.dtype)
    c1 = G.encode(x1, VISIBLE)
    c2 = G.encode(x2, INFRARED)

    same1 = G.decode(c1.prototype, c1.style, c1.illumination, c1.pose)
    same2 = G.decode(c2.prototype, c2.style, c2.illumination, c2.pose)
    x21 = G.decode(c2.prototype, c2.style, c1.illumination, c1.pose)
    x12 = G.decode(c1.prototype, c1.style, c2.illumination, c2.pose)
    illum1 = G.decode(c2.prototype, c2.style, c1.illumination, c2.pose)
    illum2 = G.decode(c1.prototype, c1.style, c2.illumination, c1.pose)

    r12 = G.encode(x12, INFRARED)
    r21 = G.encode(x21, VISIBLE)
    # cycle for x_1 takes p, a^s from x12 (re-encoded as modality 2) and a^ex
    # from x21 (re-encoded as modality 1); the mirror swaps roles
    cycle1 = G.decode(r12.prototype, r12.style, r21.illumination, r21.pose)
    cycle2 = G.decode(r21.prototype, r21.style, r12.illumination, r12.pose)
    return GenerationRecord(x1, x2, c1, c2, same1, same2, x12, x21, illum1, illum2,
                            r12, r21, cycle1, cycle2)
