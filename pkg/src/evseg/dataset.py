"""Accident-sequence datasets on disk: raster codec, layout, condition metadata.

Layout::

    root/manifest                                  one sequence id per line
    root/sequences/<id>/meta                       key=value (light, weather, occasion)
    root/sequences/<id>/frames/0001.ras ...        RGB frames
    root/sequences/<id>/label_0011.ras             optional trainId annotation
    root/sequences/<id>/events/0010_0011.evt       optional pre-simulated event streams
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError, ValidationError
from .events import read_events, write_events
from .metrics import LabelMap, check_labels

RASTER_MAGIC = b"RAS1"
RASTER_HEADER = struct.Struct("<4sIIBB")
RASTER_EXT = ".ras"

LIGHT = ("day", "night")
WEATHER = ("sunny", "rainy")
OCCASION = ("highway", "urban", "rural", "tunnel")
VOCAB = {"light": LIGHT, "weather": WEATHER, "occasion": OCCASION}

# sequence counts per condition in the published accident benchmark
TABLE1_COUNTS = {
    "light": {"day": 285, "night": 28},
    "weather": {"sunny": 297, "rainy": 16},
    "occasion": {"highway": 32, "urban": 241, "rural": 38, "tunnel": 2},
}
NUM_SEQUENCES = 313
FRAMES_PER_SEQUENCE = 40
ANNOTATED_INDEX = 11
PRE_ACCIDENT_FRAMES = 10


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- raster codec -------------------------------------------------------------------

def encode_raster(arr) -> bytes:
    """H x W (1 channel) or H x W x C array of uint8/uint16."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise DimensionError("raster must be H x W or H x W x C")
    if a.dtype == np.uint8:
        depth, dt = 8, "u1"
    elif a.dtype == np.uint16:
        depth, dt = 16, "<u2"
    else:
        raise ValidationError(f"raster dtype must be uint8 or uint16, got {a.dtype}")
    h, w, c = a.shape
    return RASTER_HEADER.pack(RASTER_MAGIC, h, w, c, depth) + np.ascontiguousarray(a, dt).tobytes()


def _raster_header(buf, offset=0):
    if len(buf) < RASTER_HEADER.size:
        raise ParseError("truncated raster header", offset=len(buf))
    magic, h, w, c, depth = RASTER_HEADER.unpack_from(buf, offset)
    if magic != RASTER_MAGIC:
        raise ParseError(f"bad raster magic {magic!r}", offset=0)
    if depth not in (8, 16) or c < 1:
        raise ParseError(f"unsupported raster channels={c} bitdepth={depth}", offset=12)
    return h, w, c, depth


def decode_raster(buf: bytes) -> np.ndarray:
    h, w, c, depth = _raster_header(buf)
    dt = "u1" if depth == 8 else "<u2"
    need = RASTER_HEADER.size + h * w * c * (depth // 8)
    if len(buf) != need:
        raise ParseError(f"raster payload size {len(buf)} != {need}", offset=min(len(buf), need))
    a = np.frombuffer(buf, dt, offset=RASTER_HEADER.size).reshape(h, w, c)
    a = a.astype(np.uint8 if depth == 8 else np.uint16)
    return a[:, :, 0] if c == 1 else a


def read_raster(path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes())


def raster_shape(path):
    with open(path, "rb") as fh:
        h, w, _, _ = _raster_header(fh.read(RASTER_HEADER.size))
    return h, w


def write_raster(path, arr):
    atomic_write(path, encode_raster(arr))


def read_label(path) -> LabelMap:
    a = read_raster(path)
    if a.ndim != 2 or a.dtype != np.uint8:
        raise ValidationError(f"{path}: label raster must be single-channel 8-bit")
    return LabelMap(a)


def write_label(path, label):
    data = label.data if isinstance(label, LabelMap) else check_labels(label)
    write_raster(path, np.asarray(data, dtype=np.uint8))


def to_uint8(frame):
    """Float [0, 1] image to 8-bit."""
    return np.clip(np.round(np.asarray(frame) * 255), 0, 255).astype(np.uint8)


# -- records ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conditions:
    light: str = "day"
    weather: str = "sunny"
    occasion: str = "urban"

    def __post_init__(self):
        for key, vocab in VOCAB.items():
            v = getattr(self, key)
            if v not in vocab:
                raise ValidationError(f"{key}={v!r} not in closed vocabulary {vocab}")


class LazyFrames:
    """Frame sequence that reads rasters on access."""

    def __init__(self, paths):
        self.paths = list(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return read_raster(self.paths[i])

    def shape(self, i):
        return raster_shape(self.paths[i])


@dataclass
class SequenceRecord:
    id: str
    frames: object
    annotated_index: int = ANNOTATED_INDEX
    annotation: LabelMap | None = None
    conditions: Conditions = field(default_factory=Conditions)
    event_paths: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frames)
        if not 1 <= self.annotated_index <= n:
            raise ValidationError(
                f"{self.id}: annotated index {self.annotated_index} outside 1..{n}")
        if self.annotation is not None:
            fs = self.frame_shape(self.annotated_index)
            if self.annotation.shape != fs:
                raise ValidationError(
                    f"{self.id}: annotation {self.annotation.shape} != frame {fs}")

    def frame(self, index):
        """1-based frame access."""
        return self.frames[index - 1]

    def frame_shape(self, index):
        if isinstance(self.frames, LazyFrames):
            return self.frames.shape(index - 1)
        return tuple(np.asarray(self.frames[index - 1]).shape[:2])

    @staticmethod
    def phase(index):
        return "pre" if index <= PRE_ACCIDENT_FRAMES else "during"

    def events(self, a, b):
        path = self.event_paths.get((a, b))
        return None if path is None else read_events(path)


def _parse_meta(text, seq_id):
    meta = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"sequence {seq_id}: meta line {n} is not key=value: {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        meta[k] = v
    missing = [k for k in VOCAB if k not in meta]
    if missing:
        raise ParseError(f"sequence {seq_id}: meta missing {missing}")
    return meta


def load_sequence(seq_dir, seq_id=None) -> SequenceRecord:
    seq_dir = Path(seq_dir)
    seq_id = seq_id or seq_dir.name
    meta_path = seq_dir / "meta"
    if not meta_path.exists():
        raise ParseError(f"sequence {seq_id}: no meta file")
    meta = _parse_meta(meta_path.read_text(), seq_id)
    cond = Conditions(meta["light"], meta["weather"], meta["occasion"])
    try:
        idx = int(meta.get("annotated_index", ANNOTATED_INDEX))
    except ValueError:
        raise ParseError(f"sequence {seq_id}: bad annotated_index") from None
    frames = LazyFrames(sorted((seq_dir / "frames").glob("*" + RASTER_EXT)))
    label_path = seq_dir / f"label_{idx:04d}{RASTER_EXT}"
    annotation = read_label(label_path) if label_path.exists() else None
    events = {}
    ev_dir = seq_dir / "events"
    if ev_dir.is_dir():
        for p in sorted(ev_dir.glob("*.evt")):
            a, b = (int(s) for s in p.stem.split("_"))
            events[(a, b)] = p
    return SequenceRecord(seq_id, frames, idx, annotation, cond, events)


def load_dataset(root) -> list:
    root = Path(root)
    manifest = root / "manifest"
    if not manifest.exists():
        raise ParseError(f"{root}: no manifest")
    ids = [s.strip() for s in manifest.read_text().splitlines() if s.strip()]
    return [load_sequence(root / "sequences" / i, i) for i in ids]


def write_sequence(root, record: SequenceRecord, events=None):
    """Write one record (frames given as arrays) plus optional {(a, b): EventStream}."""
    d = Path(root) / "sequences" / record.id
    for i in range(len(record.frames)):
        write_raster(d / "frames" / f"{i + 1:04d}{RASTER_EXT}", np.asarray(record.frames[i]))
    c = record.conditions
    meta = f"light={c.light}\nweather={c.weather}\noccasion={c.occasion}\n"
    if record.annotated_index != ANNOTATED_INDEX:
        meta += f"annotated_index={record.annotated_index}\n"
    atomic_write(d / "meta", meta.encode())
    if record.annotation is not None:
        write_label(d / f"label_{record.annotated_index:04d}{RASTER_EXT}", record.annotation)
    for (a, b), stream in (events or {}).items():
        atomic_write(d / "events" / f"{a:04d}_{b:04d}.evt", write_events(stream))


def write_manifest(root, ids):
    atomic_write(Path(root) / "manifest", "".join(f"{i}\n" for i in ids).encode())


def condition_slice(records, predicate=None, **conditions):
    """Records whose conditions satisfy ``predicate`` and match every keyword."""
    for k, v in conditions.items():
        if k not in VOCAB:
            raise ValidationError(f"unknown condition {k!r}")
    out = []
    for r in records:
        if predicate is not None and not predicate(r.conditions):
            continue
        if all(getattr(r.conditions, k) == v for k, v in conditions.items()):
            out.append(r)
    return out


def parse_slice(expr):
    """'light=night,weather=rainy' -> {'light': 'night', 'weather': 'rainy'}."""
    out = {}
    for part in filter(None, (s.strip() for s in (expr or "").split(","))):
        if "=" not in part:
            raise ValidationError(f"slice term {part!r} is not key=value")
        k, v = part.split("=", 1)
        if k not in VOCAB or v not in VOCAB[k]:
            raise ValidationError(f"bad slice term {part!r}")
        out[k] = v
    return out
