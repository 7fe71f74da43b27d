"""RGB-only, event-only, sparse-to-dense (s2d) and dense-to-sparse (d2s) segmentation nets.

All four share a 4-stage residual encoder, a pyramid pooling context module and a
three-step upsampling decoder with 1x1 skip projections from the RGB stages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.nn import Conv2d, FrozenAffine, Linear, Module
from .engine.optim import SGD
from .engine.tensor import Tensor
from .errors import ConfigError, NumericError
from .losses import bce_loss, ce_loss
from .metrics import NUM_CLASSES

MODEL_KINDS = ("rgb", "event", "s2d", "d2s")
RESIDUAL_GAIN = 0.1
HEAD_GAIN = 0.1
GATE_BIAS = 2.0


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple = (64, 128, 256, 512)
    stage_downsample: tuple = (4, 8, 16, 32)
    blocks_per_stage: int = 2
    toy_scale: bool = False
    decoder_channels: int = 128
    frozen_affine: bool = False

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_downsample) != 4:
            raise ConfigError("backbone needs exactly 4 stages")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channels must be >= 1")
        ds = self.stage_downsample
        if any(b <= a for a, b in zip(ds, ds[1:])) or ds[0] < 1:
            raise ConfigError(f"downsample factors must strictly increase, got {ds}")
        if any(b % a for a, b in zip(ds, ds[1:])):
            raise ConfigError(f"each downsample factor must divide the next, got {ds}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")

    @classmethod
    def toy(cls, **kw):
        kw.setdefault("blocks_per_stage", 1)
        return cls(toy_scale=True, **kw)

    @property
    def channels(self):
        if self.toy_scale:
            return tuple(max(1, c // 8) for c in self.stage_channels)
        return tuple(self.stage_channels)

    @property
    def width(self):
        return max(1, self.decoder_channels // 8) if self.toy_scale else self.decoder_channels

    def spp_sizes(self, sizes=None):
        if sizes is not None:
            return tuple(sizes)
        return (1, 2) if self.toy_scale else (1, 2, 3, 6)


@dataclass(frozen=True)
class S2DConfig:
    event_channels_in: int = 2
    attention_reduction: int = 4
    spp_pool_sizes: tuple | None = None
    event_stage_channels: tuple | None = None
    event_after_spp: bool = False

    def __post_init__(self):
        if self.event_channels_in < 1 or self.attention_reduction < 1:
            raise ConfigError("event_channels_in and attention_reduction must be >= 1")


@dataclass(frozen=True)
class D2SConfig:
    event_branch_channels: tuple = (64, 32, 16, 8)
    gate_source_stages: tuple = (0, 1, 2, 3)
    event_target: str = "binary_occupancy"
    target_channels: int = 2
    spp_pool_sizes: tuple | None = None
    event_after_spp: bool = False

    def __post_init__(self):
        if len(self.event_branch_channels) != 4 or len(self.gate_source_stages) != 4:
            raise ConfigError("the event branch has exactly 4 layers")
        if any(s not in range(4) for s in self.gate_source_stages):
            raise ConfigError("gate_source_stages entries must be stage indices 0..3")
        if self.event_target not in ("binary_occupancy", "counts"):
            raise ConfigError(f"unknown event_target {self.event_target!r}")
        if self.target_channels not in (1, 2):
            raise ConfigError("target_channels is 1 (P) or 2 (P+N)")

    def branch_channels(self, toy):
        if toy:
            return tuple(max(1, c // 4) for c in self.event_branch_channels)
        return tuple(self.event_branch_channels)


def event_target(counts, mode="binary_occupancy"):
    """BCE target from per-polarity event counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if mode == "binary_occupancy":
        return (counts > 0).astype(np.float64)
    return 1.0 - np.exp(-counts)


# -- building blocks ---------------------------------------------------------------

class ResBlock(Module):
    def __init__(self, cin, cout, down, rng, dtype, affine=False):
        self.down = down
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype=dtype)
        # small residual branch at init keeps activations bounded without normalization
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype=dtype, gain=RESIDUAL_GAIN)
        self.proj = Conv2d(cin, cout, 1, rng, dtype=dtype) if cin != cout else None
        self.affine = FrozenAffine(cout, dtype) if affine else None

    def forward(self, x):
        if self.down > 1:
            x = ops.avg_pool(x, self.down)
        y = self.conv2(ops.relu(self.conv1(x)))
        if self.affine is not None:
            y = self.affine(y)
        return ops.relu(ops.add(y, self.proj(x) if self.proj is not None else x))


class Stage(Module):
    def __init__(self, cin, cout, down, blocks, rng, dtype, affine):
        self.blocks = [ResBlock(cin if i == 0 else cout, cout, down if i == 0 else 1,
                                rng, dtype, affine) for i in range(blocks)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Encoder(Module):
    """Full-resolution stem conv, max-pool to the first stage stride, 4 residual stages."""

    def __init__(self, cin, cfg: BackboneConfig, rng, dtype, channels=None):
        chans = channels or cfg.channels
        ds = cfg.stage_downsample
        self.pool = ds[0]
        self.stem = Conv2d(cin, chans[0], 3, rng, dtype=dtype)
        downs = (1,) + tuple(b // a for a, b in zip(ds, ds[1:]))
        self.stages = [Stage(chans[max(k - 1, 0)], chans[k], downs[k], cfg.blocks_per_stage,
                             rng, dtype, cfg.frozen_affine) for k in range(4)]
        self.channels = chans

    def stem_forward(self, x):
        return ops.relu(self.stem(x))

    def forward(self, x):
        s = self.stem_forward(x)
        f = ops.max_pool(s, self.pool)
        feats = []
        for st in self.stages:
            f = st(f)
            feats.append(f)
        return s, feats


class ChannelAttention(Module):
    """Squeeze-excitation: gap -> fc(C/r) -> relu -> fc(C) -> sigmoid, applied per channel."""

    def __init__(self, channels, reduction, rng, dtype):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng, dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype)

    def gains(self, x):
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(x)))))

    def forward(self, x):
        return ops.scale_channels(x, self.gains(x))


class PyramidPooling(Module):
    """Pyramid pooling context with an optional extra (event) stream."""

    def __init__(self, cin, width, sizes, rng, dtype, extra_channels=0, extra_after=False):
        self.sizes = tuple(sizes)
        branch = max(1, width // len(self.sizes))
        self.bottleneck = Conv2d(cin, width, 1, rng, dtype=dtype)
        self.branches = [Conv2d(width, branch, 1, rng, dtype=dtype) for _ in self.sizes]
        self.extra = Conv2d(extra_channels, branch, 1, rng, dtype=dtype) if extra_channels else None
        self.extra_after = extra_after
        fuse_in = width + branch * len(self.sizes)
        if self.extra is not None and not extra_after:
            fuse_in += branch
        self.fuse = Conv2d(fuse_in, width, 1, rng, dtype=dtype)
        self.post = (Conv2d(width + branch, width, 1, rng, dtype=dtype)
                     if self.extra is not None and extra_after else None)

    def _extra(self, e, hw):
        if e.shape[2:] != hw:
            if e.shape[2] >= hw[0] and e.shape[3] >= hw[1]:
                e = ops.adaptive_avg_pool(e, hw)
            else:
                e = ops.bilinear_upsample(e, hw)
        return ops.relu(self.extra(e))

    def forward(self, x, extra=None):
        b = ops.relu(self.bottleneck(x))
        hw = b.shape[2:]
        parts = [b]
        for size, conv in zip(self.sizes, self.branches):
            p = ops.relu(conv(ops.adaptive_avg_pool(b, size)))
            parts.append(ops.bilinear_upsample(p, hw))
        if self.extra is not None and not self.extra_after:
            parts.append(self._extra(extra, hw))
        out = ops.relu(self.fuse(ops.concat(parts)))
        if self.post is not None:
            out = ops.relu(self.post(ops.concat([out, self._extra(extra, hw)])))
        return out


class Decoder(Module):
    """Three upsampling steps, each adding a 1x1-projected encoder skip."""

    def __init__(self, skip_channels, width, rng, dtype):
        self.skips = [Conv2d(c, width, 1, rng, dtype=dtype) for c in reversed(skip_channels)]
        self.blends = [Conv2d(width, width, 3, rng, dtype=dtype) for _ in skip_channels]

    def forward(self, x, skips):
        for proj, blend, s in zip(self.skips, self.blends, reversed(skips)):
            x = ops.add(ops.bilinear_upsample(x, s.shape[2:]), proj(s))
            x = ops.relu(blend(x))
        return x


def _as_tensor(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class _SegBase(Module):
    kind = ""

    def _head(self, ctx, feats, size):
        x = self.decoder(ctx, feats[:3])
        return ops.bilinear_upsample(self.head(x), size)


class SegNet(_SegBase):
    """Single-modality encoder-decoder (RGB-only or event-only baseline)."""

    def __init__(self, cin, backbone, num_classes, rng, dtype, kind="rgb", spp_sizes=None):
        self.kind = kind
        self.input_key = "rgb" if kind == "rgb" else "events"
        c = backbone.channels
        w = backbone.width
        self.encoder = Encoder(cin, backbone, rng, dtype)
        self.spp = PyramidPooling(c[3], w, backbone.spp_sizes(spp_sizes), rng, dtype)
        self.decoder = Decoder(c[:3], w, rng, dtype)
        self.head = Conv2d(w, num_classes, 1, rng, dtype=dtype, gain=HEAD_GAIN)

    def forward(self, inputs):
        x = _as_tensor(inputs[self.input_key], self.head.weight.dtype)
        _, feats = self.encoder(x)
        return {"seg": self._head(self.spp(feats[3]), feats, x.shape[2:])}


class S2DNet(_SegBase):
    """Dual encoders; after every stage the attention-weighted event feature is added
    to the RGB stream, and the last event feature joins the pyramid pooling."""

    kind = "s2d"

    def __init__(self, backbone, cfg: S2DConfig, num_classes, rng, dtype):
        c = backbone.channels
        ec = tuple(cfg.event_stage_channels or c)
        for k, (a, b) in enumerate(zip(c, ec)):
            if a != b:
                raise ConfigError(f"stage {k + 1}: RGB branch has {a} channels, event branch {b}")
        w = backbone.width
        self.encoder = Encoder(3, backbone, rng, dtype)
        self.event_encoder = Encoder(cfg.event_channels_in, backbone, rng, dtype, ec)
        self.attention = [ChannelAttention(ch, cfg.attention_reduction, rng, dtype) for ch in c]
        self.spp = PyramidPooling(c[3], w, backbone.spp_sizes(cfg.spp_pool_sizes), rng, dtype,
                                  extra_channels=c[3], extra_after=cfg.event_after_spp)
        self.decoder = Decoder(c[:3], w, rng, dtype)
        self.head = Conv2d(w, num_classes, 1, rng, dtype=dtype, gain=HEAD_GAIN)

    def forward(self, inputs):
        dtype = self.head.weight.dtype
        rgb = _as_tensor(inputs["rgb"], dtype)
        ev = _as_tensor(inputs["events"], dtype)
        r = ops.max_pool(self.encoder.stem_forward(rgb), self.encoder.pool)
        e = ops.max_pool(self.event_encoder.stem_forward(ev), self.event_encoder.pool)
        feats = []
        for rs, es, att in zip(self.encoder.stages, self.event_encoder.stages, self.attention):
            r = rs(r)
            e = es(e)
            r = ops.add(r, att(e))
            feats.append(r)
        return {"seg": self._head(self.spp(r, extra=e), feats, rgb.shape[2:])}


class D2SNet(_SegBase):
    """RGB encoder plus a full-resolution event branch supervised with event rasters.

    Each branch layer is conv3x3 -> gate -> conv1x1, the gate being a sigmoid map
    computed from an RGB stage. The last branch feature joins the pyramid pooling.
    """

    kind = "d2s"

    def __init__(self, backbone, cfg: D2SConfig, num_classes, rng, dtype):
        c = backbone.channels
        w = backbone.width
        ech = cfg.branch_channels(backbone.toy_scale)
        self.cfg = cfg
        self.encoder = Encoder(3, backbone, rng, dtype)
        prev = c[0]
        self.ev_conv3 = []
        self.ev_gate = []
        self.ev_conv1 = []
        for k in range(4):
            self.ev_conv3.append(Conv2d(prev, ech[k], 3, rng, dtype=dtype))
            gate = Conv2d(c[cfg.gate_source_stages[k]], 1, 1, rng, dtype=dtype)
            # gates start mostly open so the unnormalized branch does not fade out
            gate.bias.data[:] = GATE_BIAS
            self.ev_gate.append(gate)
            self.ev_conv1.append(Conv2d(ech[k], ech[k], 1, rng, dtype=dtype))
            prev = ech[k]
        self.ev_out = Conv2d(prev, cfg.target_channels, 1, rng, dtype=dtype)
        self.spp = PyramidPooling(c[3], w, backbone.spp_sizes(cfg.spp_pool_sizes), rng, dtype,
                                  extra_channels=prev, extra_after=cfg.event_after_spp)
        self.decoder = Decoder(c[:3], w, rng, dtype)
        self.head = Conv2d(w, num_classes, 1, rng, dtype=dtype, gain=HEAD_GAIN)

    def force_open_gates(self, bias=1e4):
        """Saturate every gate at 1 by overriding its bias."""
        for g in self.ev_gate:
            g.bias.data = np.full_like(g.bias.data, bias)

    def forward(self, inputs):
        rgb = _as_tensor(inputs["rgb"], self.head.weight.dtype)
        stem = self.encoder.stem_forward(rgb)
        f = ops.max_pool(stem, self.encoder.pool)
        feats = []
        for st in self.encoder.stages:
            f = st(f)
            feats.append(f)
        full = rgb.shape[2:]
        a = stem
        for k in range(4):
            a = ops.relu(self.ev_conv3[k](a))
            # 1x1 conv and bilinear resize commute (rows of the resize sum to 1)
            gate = ops.sigmoid(ops.bilinear_upsample(
                self.ev_gate[k](feats[self.cfg.gate_source_stages[k]]), full))
            # the 1x1 stays linear: a ReLU here silences the narrow late layers
            a = self.ev_conv1[k](ops.mul(a, gate))
        return {"seg": self._head(self.spp(feats[3], extra=a), feats, full),
                "event": self.ev_out(a)}


def build_rgb(backbone, num_classes=NUM_CLASSES, seed=0, dtype=np.float32):
    return SegNet(3, backbone, num_classes, np.random.default_rng(seed), dtype, "rgb")


def build_event(backbone, event_channels, num_classes=NUM_CLASSES, seed=0, dtype=np.float32):
    return SegNet(event_channels, backbone, num_classes, np.random.default_rng(seed), dtype,
                  "event")


def build_s2d(backbone, cfg=None, num_classes=NUM_CLASSES, seed=0, dtype=np.float32):
    return S2DNet(backbone, cfg or S2DConfig(), num_classes, np.random.default_rng(seed), dtype)


def build_d2s(backbone, cfg=None, num_classes=NUM_CLASSES, seed=0, dtype=np.float32):
    return D2SNet(backbone, cfg or D2SConfig(), num_classes, np.random.default_rng(seed), dtype)


def build_network(kind, backbone, event_channels=2, num_classes=NUM_CLASSES, seed=0,
                  dtype=np.float32, s2d=None, d2s=None):
    if kind == "rgb":
        return build_rgb(backbone, num_classes, seed, dtype)
    if kind == "event":
        return build_event(backbone, event_channels, num_classes, seed, dtype)
    if kind == "s2d":
        cfg = s2d or S2DConfig(event_channels_in=event_channels)
        return build_s2d(backbone, cfg, num_classes, seed, dtype)
    if kind == "d2s":
        cfg = d2s or D2SConfig(target_channels=event_channels)
        return build_d2s(backbone, cfg, num_classes, seed, dtype)
    raise ConfigError(f"unknown model kind {kind!r}; valid: {', '.join(MODEL_KINDS)}")


def forward(network, inputs):
    return network(inputs)


@dataclass(frozen=True)
class LossConfig:
    ce_weight: float = 1.0
    bce_weight: float = 1.0


def compute_losses(network, batch, loss_cfg=LossConfig()):
    """Forward pass plus the loss terms; returns ``(total, {name: term})``."""
    out = network(batch)
    terms = {"ce": ce_loss(out["seg"], batch["labels"])}
    if network.kind == "d2s":
        if batch.get("event_target") is None:
            raise ConfigError("d2s training needs an event ground-truth raster")
        terms["bce"] = bce_loss(out["event"], batch["event_target"])
    for name, t in terms.items():
        if not np.isfinite(t.data):
            raise NumericError(f"{name} loss is not finite", node=name)
    total = ops.mul(terms["ce"], loss_cfg.ce_weight)
    if "bce" in terms:
        total = ops.add(total, ops.mul(terms["bce"], loss_cfg.bce_weight))
    return total, terms


def train_step(network, batch, optimizer: SGD, loss_cfg=LossConfig()):
    """One SGD update; returns the scalar loss terms."""
    network.zero_grad()
    total, terms = compute_losses(network, batch, loss_cfg)
    total.backward()
    optimizer.step(network.named_parameters())
    losses = {k: float(v.data) for k, v in terms.items()}
    losses["total"] = float(total.data)
    return losses
