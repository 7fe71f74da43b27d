"""Dense event representations: discretized event volumes and event frames.

Volumes are laid out ``B x H x W`` with the positive-polarity block first.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, ValidationError
from .events import EventStream

VOLUME_MAGIC = b"EVV1"
VOLUME_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ReprConfig:
    """How a stream is rasterized.

    ``merge_polarities`` ignores polarity and uses ``bins_pos`` channels for all
    events. ``joint_normalization`` normalizes time over the whole stream instead
    of per polarity.
    """

    bins_pos: int
    bins_neg: int
    height: int
    width: int
    mode: str = "volume"
    merge_polarities: bool = False
    joint_normalization: bool = False
    name: str = ""

    def __post_init__(self):
        if self.bins_pos < 0 or self.bins_neg < 0:
            raise ConfigError("bin counts must be non-negative")
        if self.bins_pos + self.bins_neg < 1:
            raise ConfigError("need at least one bin")
        if self.mode not in ("volume", "frame"):
            raise ConfigError(f"mode must be 'volume' or 'frame', got {self.mode!r}")
        if self.merge_polarities and self.bins_neg:
            raise ConfigError("merged polarities use bins_pos only")
        if self.height < 1 or self.width < 1:
            raise ConfigError("bad geometry")

    @property
    def channels(self):
        return self.bins_pos + self.bins_neg


@dataclass(frozen=True, eq=False)
class EventVolume:
    data: np.ndarray
    config: ReprConfig
    dropped: int = 0

    def __post_init__(self):
        c = self.config
        if self.data.shape != (c.channels, c.height, c.width):
            raise DimensionError(f"volume shape {self.data.shape} does not match config")


TABLE2 = {
    "B1": dict(bins_pos=1, bins_neg=0, mode="volume", merge_polarities=True),
    "B2": dict(bins_pos=1, bins_neg=1, mode="volume"),
    "B18": dict(bins_pos=9, bins_neg=9, mode="volume"),
    "P": dict(bins_pos=1, bins_neg=0, mode="frame"),
    "P+N": dict(bins_pos=1, bins_neg=1, mode="frame"),
}


def table2_config(name, height, width) -> ReprConfig:
    """The named ablation representations (B1, B2, B18, P, P+N)."""
    if name not in TABLE2:
        raise ConfigError(f"unknown representation {name!r}; valid: {', '.join(TABLE2)}")
    return ReprConfig(height=height, width=width, name=name, **TABLE2[name])


def _check_geometry(stream: EventStream, cfg: ReprConfig):
    if len(stream) and (stream.x.max() >= cfg.width or stream.y.max() >= cfg.height):
        raise ValidationError(
            f"stream coordinates exceed representation geometry {cfg.width}x{cfg.height}"
        )


def _groups(stream: EventStream, cfg: ReprConfig):
    """(channel offset, bin count, event mask) per polarity block, plus dropped count."""
    if cfg.merge_polarities:
        return [(0, cfg.bins_pos, np.ones(len(stream), bool))], 0
    pos = stream.p > 0
    groups, dropped = [], 0
    for off, n, mask in ((0, cfg.bins_pos, pos), (cfg.bins_pos, cfg.bins_neg, ~pos)):
        if n > 0:
            groups.append((off, n, mask))
        else:
            dropped += int(mask.sum())
    return groups, dropped


def normalized_times(t, n_bins, t_first=None, t_last=None):
    """Map timestamps onto ``[0, n_bins-1]``; a zero-length span maps to 0."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return t
    t_first = t.min() if t_first is None else t_first
    t_last = t.max() if t_last is None else t_last
    span = t_last - t_first
    if span <= 0:
        return np.zeros_like(t)
    # rounding can land t_last a hair past n_bins-1; keep it on the last bin
    return np.clip((n_bins - 1) * (t - t_first) / span, 0.0, n_bins - 1)


def voxelize(stream: EventStream, cfg: ReprConfig) -> EventVolume:
    """Linear-in-time event volume; each event splits unit mass between two bins."""
    _check_geometry(stream, cfg)
    hw = cfg.height * cfg.width
    grid = np.zeros(cfg.channels * hw, dtype=np.float64)
    groups, dropped = _groups(stream, cfg)
    for off, n, mask in groups:
        t = stream.t[mask]
        if t.size == 0:
            continue
        if cfg.joint_normalization and len(stream):
            tn = normalized_times(t, n, stream.t.min(), stream.t.max())
        else:
            tn = normalized_times(t, n)
        pix = stream.y[mask] * cfg.width + stream.x[mask]
        lo = np.floor(tn).astype(np.int64)
        frac = tn - lo
        grid += np.bincount((off + lo) * hw + pix, weights=1.0 - frac, minlength=grid.size)
        # frac > 0 implies lo < n-1, so the upper bin always exists
        hi_ok = frac > 0
        grid += np.bincount((off + lo[hi_ok] + 1) * hw + pix[hi_ok], weights=frac[hi_ok],
                            minlength=grid.size)
    data = grid.reshape(cfg.channels, cfg.height, cfg.width)
    return EventVolume(data, cfg, dropped)


def to_event_frame(stream: EventStream, cfg: ReprConfig) -> EventVolume:
    """Per-pixel event counts, one channel per polarity block (bins collapse)."""
    _check_geometry(stream, cfg)
    hw = cfg.height * cfg.width
    grid = np.zeros((cfg.channels, hw), dtype=np.float64)
    groups, dropped = _groups(stream, cfg)
    for off, n, mask in groups:
        pix = stream.y[mask] * cfg.width + stream.x[mask]
        grid[off] = np.bincount(pix, minlength=hw)
    return EventVolume(grid.reshape(cfg.channels, cfg.height, cfg.width), cfg, dropped)


def represent(stream: EventStream, cfg: ReprConfig) -> EventVolume:
    if cfg.mode == "frame":
        return to_event_frame(stream, cfg)
    return voxelize(stream, cfg)


def write_volume(vol: EventVolume | np.ndarray) -> bytes:
    data = vol.data if isinstance(vol, EventVolume) else np.asarray(vol)
    if data.ndim != 3:
        raise DimensionError("volume must be B x H x W")
    b, h, w = data.shape
    return VOLUME_HEADER.pack(VOLUME_MAGIC, b, h, w) + np.ascontiguousarray(data, "<f4").tobytes()


def read_volume(source) -> np.ndarray:
    buf = bytes(source) if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if len(buf) < VOLUME_HEADER.size:
        raise ParseError("truncated volume header", offset=len(buf))
    magic, b, h, w = VOLUME_HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    need = VOLUME_HEADER.size + 4 * b * h * w
    if len(buf) != need:
        raise ParseError(f"expected {need} bytes, got {len(buf)}", offset=min(len(buf), need))
    return np.frombuffer(buf, "<f4", offset=VOLUME_HEADER.size).reshape(b, h, w).copy()
