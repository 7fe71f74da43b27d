"""Event stream data model, binary/text codecs and a two-frame event simulator."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DataError, DimensionError, OrderingError, ParseError, ValidationError

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sIIQdd")
RECORD_DTYPE = np.dtype(
    [("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")]
)
assert HEADER.size == 36 and RECORD_DTYPE.itemsize == 16


class Event(NamedTuple):
    x: int
    y: int
    t: float
    p: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Columnar, immutable container of events on a ``width`` x ``height`` sensor.

    Events are kept sorted by timestamp. Per-event access yields :class:`Event`.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t_start: float = 0.0
    t_end: float = 0.0

    def __post_init__(self):
        t = _frozen(self.t, np.float64)
        x = _frozen(self.x, np.int64)
        y = _frozen(self.y, np.int64)
        p = _frozen(self.p, np.int8)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "t_end", float(self.t_end))
        self.validate()

    def validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise DimensionError("event columns differ in length")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"bad sensor geometry {self.width}x{self.height}")
        if n == 0:
            return
        if not np.all(np.isfinite(self.t)):
            raise ValidationError("non-finite timestamp")
        bad = (self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside {self.width}x{self.height}"
            )
        if not np.all((self.p == 1) | (self.p == -1)):
            raise ValidationError("polarity must be -1 or +1")
        if np.any(np.diff(self.t) < 0):
            raise OrderingError("events not sorted by timestamp")
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise ValidationError(
                f"timestamps [{self.t[0]}, {self.t[-1]}] outside [{self.t_start}, {self.t_end}]"
            )

    @classmethod
    def empty(cls, width, height, t_start=0.0, t_end=0.0):
        z = np.zeros(0)
        return cls(width, height, z, z, z, z, t_start, t_end)

    @classmethod
    def from_events(cls, width, height, events, t_start=None, t_end=None):
        """Build from an iterable of :class:`Event`; sorts by (t, y, x, p)."""
        events = list(events)
        cols = np.array([(e.t, e.x, e.y, e.p) for e in events], dtype=np.float64).reshape(-1, 4)
        order = np.lexsort((cols[:, 3], cols[:, 1], cols[:, 2], cols[:, 0]))
        cols = cols[order]
        if t_start is None:
            t_start = cols[0, 0] if len(cols) else 0.0
        if t_end is None:
            t_end = cols[-1, 0] if len(cols) else 0.0
        return cls(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], t_start, t_end)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), float(self.t[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @property
    def events(self):
        return list(self)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.width, self.height, self.t_start, self.t_end)
            == (other.width, other.height, other.t_start, other.t_end)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def shifted(self, dt):
        return EventStream(self.width, self.height, self.t + dt, self.x, self.y, self.p,
                           self.t_start + dt, self.t_end + dt)

    def flipped(self):
        """Same events with every polarity negated."""
        return EventStream(self.width, self.height, self.t, self.x, self.y, -self.p,
                           self.t_start, self.t_end)


@dataclass(frozen=True)
class SimulatorConfig:
    contrast_threshold: float = 0.2
    log_eps: float = 1e-3
    max_events_per_pixel: int = 32

    def __post_init__(self):
        if not self.contrast_threshold > 0:
            raise ValidationError("contrast_threshold must be > 0")
        if not self.log_eps > 0:
            raise ValidationError("log_eps must be > 0")
        if int(self.max_events_per_pixel) < 1:
            raise ValidationError("max_events_per_pixel must be >= 1")


def event_counts(frame0, frame1, cfg: SimulatorConfig):
    """Per-pixel signed event counts ``sign(d) * min(floor(|d|/C), cap)`` for the pair."""
    frame0 = np.asarray(frame0, dtype=np.float64)
    frame1 = np.asarray(frame1, dtype=np.float64)
    if frame0.shape != frame1.shape or frame0.ndim != 2:
        raise DimensionError(f"frame shapes {frame0.shape} and {frame1.shape} must be equal 2-D")
    for f in (frame0, frame1):
        if not np.all(np.isfinite(f)):
            raise DataError("non-finite pixel value")
        if f.size and (f.min() < 0 or f.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")
    delta = np.log(frame1 + cfg.log_eps) - np.log(frame0 + cfg.log_eps)
    k = np.minimum(np.floor(np.abs(delta) / cfg.contrast_threshold), cfg.max_events_per_pixel)
    return (np.sign(delta) * k).astype(np.int64)


def simulate_events(frame0, frame1, t0, t1, cfg: SimulatorConfig | None = None) -> EventStream:
    """Threshold the log-intensity change between two grayscale frames into events.

    A pixel whose log change is ``d`` fires ``k = min(floor(|d|/C), cap)`` events of
    polarity ``sign(d)`` at ``t0 + j*(t1-t0)/k`` for ``j = 1..k``.
    """
    cfg = cfg or SimulatorConfig()
    if not t1 > t0:
        raise OrderingError(f"t1={t1} must be greater than t0={t0}")
    counts = event_counts(frame0, frame1, cfg)
    h, w = counts.shape
    ys, xs = np.nonzero(counts)
    c = counts[ys, xs]
    k = np.abs(c)
    if k.size == 0:
        return EventStream.empty(w, h, t0, t1)
    rep = np.repeat(np.arange(len(k)), k)
    # j = 1..k within each pixel
    j = np.arange(rep.size) - np.repeat(np.cumsum(k) - k, k) + 1
    # pin the last event of each pixel to t1 exactly so rounding never leaves (t0, t1]
    t = np.where(j == k[rep], t1, t0 + j * (t1 - t0) / k[rep])
    x, y, p = xs[rep], ys[rep], np.sign(c)[rep]
    order = np.lexsort((p, x, y, t))
    return EventStream(w, h, t[order], x[order], y[order], p[order], t0, t1)


# -- codecs -------------------------------------------------------------------

def write_events(stream: EventStream, format="binary") -> bytes:
    if format == "binary":
        rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        head = HEADER.pack(MAGIC, stream.width, stream.height, len(stream),
                           stream.t_start, stream.t_end)
        return head + rec.tobytes()
    if format == "text":
        out = io.StringIO()
        out.write(f"# width={stream.width} height={stream.height} "
                  f"t_start={stream.t_start!r} t_end={stream.t_end!r}\n")
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(),
                              stream.y.tolist(), stream.p.tolist()):
            out.write(f"{t!r} {x} {y} {p}\n")
        return out.getvalue().encode()
    raise ValueError(f"unknown event format {format!r}")


def _parse_binary(buf: bytes) -> EventStream:
    if len(buf) < HEADER.size:
        raise ParseError("truncated header", offset=len(buf))
    magic, w, h, n, t_start, t_end = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    need = HEADER.size + n * RECORD_DTYPE.itemsize
    if len(buf) != need:
        bad = min(len(buf), need)
        raise ParseError(f"expected {n} records ({need} bytes), got {len(buf)} bytes", offset=bad)
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=n, offset=HEADER.size)
    return EventStream(w, h, rec["t"], rec["x"], rec["y"], rec["p"], t_start, t_end)


def _parse_text(buf: bytes, width=None, height=None) -> EventStream:
    meta = {}
    rows = []
    offset = 0
    for line in buf.splitlines(keepends=True):
        body = line.decode().split("#", 1)
        if len(body) > 1:
            for tok in body[1].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        fields = body[0].split()
        if fields:
            if len(fields) != 4:
                raise ParseError(f"expected 't x y p', got {line!r}", offset=offset)
            try:
                rows.append((float(fields[0]), int(fields[1]), int(fields[2]), int(fields[3])))
            except ValueError:
                raise ParseError(f"malformed event line {line!r}", offset=offset) from None
        offset += len(line)
    cols = np.array(rows, dtype=np.float64).reshape(-1, 4)
    if width is None:
        width = int(meta["width"]) if "width" in meta else int(cols[:, 1].max(initial=0)) + 1
    if height is None:
        height = int(meta["height"]) if "height" in meta else int(cols[:, 2].max(initial=0)) + 1
    t_start = float(meta.get("t_start", cols[0, 0] if len(cols) else 0.0))
    t_end = float(meta.get("t_end", cols[-1, 0] if len(cols) else 0.0))
    return EventStream(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], t_start, t_end)


def read_events(source, format="binary", width=None, height=None) -> EventStream:
    """Parse an event file from a path or a bytes payload."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        buf = bytes(source)
    else:
        buf = Path(source).read_bytes()
    if format == "binary":
        return _parse_binary(buf)
    if format == "text":
        return _parse_text(buf, width, height)
    raise ValueError(f"unknown event format {format!r}")
