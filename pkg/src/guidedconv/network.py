"""Dual encoder-decoder depth completion network with configurable fusion.

GuideNet encodes the image and decodes it back to full resolution; DepthNet
encodes the sparse depth, fusing image features at every encoder level, and
decodes a dense depth map.  Level ``l`` has resolution H/2**l; levels
0..stage_count-1 each host one fusion stage.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .guided import GuidedConv
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, DeconvBNReLU, Module, ResBlock
from .tensor import Tensor


class FusionScheme(str, enum.Enum):
    DE_GUIDED = "DE_Guided"
    EE_GUIDED = "EE_Guided"
    DD_GUIDED = "DD_Guided"
    ADD = "Add"
    CONCAT = "Concat"
    FIRST_GUIDE = "FirstGuide"
    LAST_GUIDE = "LastGuide"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower() or member.name.lower() == str(value).lower():
                return member
        raise ValueError(f"unknown fusion scheme {value!r}; choose from {[m.value for m in cls]}")

    def operators(self, stages):
        """Fusion operator ('guided', 'add' or 'concat') for each level."""
        if self in (FusionScheme.DE_GUIDED, FusionScheme.EE_GUIDED, FusionScheme.DD_GUIDED):
            return ["guided"] * stages
        if self is FusionScheme.ADD:
            return ["add"] * stages
        if self is FusionScheme.CONCAT:
            return ["concat"] * stages
        keep = 0 if self is FusionScheme.FIRST_GUIDE else stages - 1
        return ["guided" if l == keep else "concat" for l in range(stages)]

    @property
    def placement(self):
        """Which features meet: 'DE' GuideNet decoder -> DepthNet encoder, etc."""
        if self is FusionScheme.EE_GUIDED:
            return "EE"
        if self is FusionScheme.DD_GUIDED:
            return "DD"
        return "DE"


@dataclass
class NetConfig:
    stage_count: int = 3
    channels: tuple = (32, 64, 128)
    kernel_size: int = 3
    fusion: FusionScheme = FusionScheme.DE_GUIDED
    input_height: int = 64
    input_width: int = 128
    image_channels: int = 3
    depth_scale: float = 10.0  # sparse input divided by, prediction multiplied by this (meters)

    def __post_init__(self):
        self.fusion = FusionScheme.parse(self.fusion)
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self):
        if self.stage_count < 1:
            raise ValueError("stage_count must be positive")
        if len(self.channels) != self.stage_count:
            raise ValueError(f"need {self.stage_count} channel widths, got {self.channels}")
        if any(c <= 0 for c in self.channels):
            raise ValueError(f"channel widths must be positive, got {self.channels}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        step = 2 ** self.stage_count
        if self.input_height % step or self.input_width % step:
            raise ValueError(
                f"input resolution {self.input_height}x{self.input_width} must be a multiple of {step} "
                f"for {self.stage_count} stages")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 (grayscale) or 3 (RGB)")

    def level_widths(self):
        return (self.channels[0],) + self.channels

    def to_text(self):
        d = asdict(self)
        d["fusion"] = self.fusion.value
        d["channels"] = ",".join(str(c) for c in self.channels)
        return "".join(f"{k}={v}\n" for k, v in d.items())

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(
            stage_count=int(kv["stage_count"]),
            channels=tuple(int(c) for c in kv["channels"].split(",")),
            kernel_size=int(kv["kernel_size"]),
            fusion=kv["fusion"],
            input_height=int(kv["input_height"]),
            input_width=int(kv["input_width"]),
            image_channels=int(kv.get("image_channels", 3)),
            depth_scale=float(kv.get("depth_scale", 10.0)),
        )

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


class Fusion(Module):
    """Combine an image feature with a depth feature of equal width, then BN + ReLU."""

    def __init__(self, op, channels, k=3, rng=None):
        self.op = op
        self.guide = GuidedConv(channels, channels, channels, k=k, rng=rng) if op == "guided" else None
        self.mix = Conv2d(2 * channels, channels, 1, bias=False, rng=rng) if op == "concat" else None
        self.bn = BatchNorm2d(channels)

    def forward(self, image_feat, depth_feat):
        if self.op == "guided":
            y = self.guide(image_feat, depth_feat)
        elif self.op == "add":
            y = ops.add(image_feat, depth_feat)
        else:
            y = self.mix(ops.concat([image_feat, depth_feat], axis=1))
        return ops.relu(self.bn(y))


class GuideDepthNet(Module):
    def __init__(self, config, rng):
        config.validate()
        self.config = config
        s = config.stage_count
        w = config.level_widths()
        ops_per_level = config.fusion.operators(s)
        self.guide_stem = ConvBNReLU(config.image_channels, w[0], rng=rng)
        # without a GuideNet decoder the deepest encoder stage would feed nothing
        n_enc = s - 1 if config.fusion.placement == "EE" else s
        self.guide_enc = [ResBlock(w[l], w[l + 1], stride=2, rng=rng) for l in range(n_enc)]
        if config.fusion.placement == "EE":
            self.guide_dec = []
        else:
            self.guide_dec = [DeconvBNReLU(w[l + 1], w[l], rng=rng) for l in range(s)]
        self.depth_stem = ConvBNReLU(1, w[0], rng=rng)
        self.depth_enc = [ResBlock(w[l], w[l + 1], stride=2, rng=rng) for l in range(s)]
        self.depth_dec = [DeconvBNReLU(w[l + 1], w[l], rng=rng) for l in range(s)]
        self.fusions = [Fusion(op, w[l], k=config.kernel_size, rng=rng) for l, op in enumerate(ops_per_level)]
        self.head = Conv2d(w[0], 1, 3, bias=True, rng=rng)

    def forward(self, image, sparse, record=None):
        """Predict dense depth (N, 1, H, W) in meters.

        ``record``, if a dict, receives the named intermediate tensors
        (``guide.enc{l}``, ``guide.dec{l}``, ``depth.in{l}``, ``fusion{l}``,
        ``depth.enc{l}``) for topology inspection.
        """
        image = image if isinstance(image, Tensor) else Tensor(image)
        sparse = sparse if isinstance(sparse, Tensor) else Tensor(sparse)
        if image.shape[0] != sparse.shape[0] or image.shape[2:] != sparse.shape[2:]:
            raise ValueError(f"image shape {image.shape} and sparse depth shape {sparse.shape} disagree")
        if sparse.shape[1] != 1 or image.shape[1] != self.config.image_channels:
            raise ValueError(
                f"expected {self.config.image_channels}-channel image and 1-channel depth, "
                f"got {image.shape} and {sparse.shape}")
        step = 2 ** self.config.stage_count
        if image.shape[2] % step or image.shape[3] % step:
            raise ValueError(f"input spatial size {image.shape[2:]} must be a multiple of {step}")
        rec = record if record is not None else {}
        s = self.config.stage_count
        placement = self.config.fusion.placement
        scale = self.config.depth_scale

        g = [self.guide_stem(image)]
        for enc in self.guide_enc:
            g.append(enc(g[-1]))
        for l in range(len(g)):
            rec[f"guide.enc{l}"] = g[l]
        gd = None
        if self.guide_dec:
            gd = [None] * s + [g[s]]
            for l in reversed(range(s)):
                gd[l] = ops.add(self.guide_dec[l](gd[l + 1]), g[l])
                rec[f"guide.dec{l}"] = gd[l]

        x = self.depth_stem(ops.mul(sparse, 1.0 / scale))
        skips = []
        for l in range(s):
            if placement in ("DE", "EE"):
                rec[f"depth.in{l}"] = x
                x = self.fusions[l](gd[l] if placement == "DE" else g[l], x)
                rec[f"fusion{l}"] = x
            skips.append(x)
            x = self.depth_enc[l](x)
            rec[f"depth.enc{l}"] = x
        for l in reversed(range(s)):
            x = ops.add(self.depth_dec[l](x), skips[l])
            if placement == "DD":
                rec[f"depth.in{l}"] = x
                x = self.fusions[l](gd[l], x)
                rec[f"fusion{l}"] = x
        return ops.mul(self.head(x), scale)


def build(config, seed=0):
    """Construct a model with parameters drawn deterministically from ``seed``."""
    config.validate()
    return GuideDepthNet(config, np.random.default_rng(seed))


def ancestors(tensor):
    """Ids of all tensors ``tensor`` was computed from (requires an unreleased graph)."""
    seen = set()
    stack = [tensor]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    return seen
