"""Shared builders for tests."""
import numpy as np

from evseg.dataset import (NUM_SEQUENCES, TABLE1_COUNTS, Conditions, SequenceRecord,
                           write_manifest, write_sequence)
from evseg.metrics import LabelMap
from evseg.synthetic import dilate, generate_synthetic


def table1_conditions(seed=0):
    """313 condition triples whose marginals equal the published per-condition counts."""
    rng = np.random.default_rng(seed)
    cols = {}
    for key, counts in TABLE1_COUNTS.items():
        tags = [tag for tag, n in counts.items() for _ in range(n)]
        cols[key] = rng.permutation(tags)
    return [Conditions(cols["light"][i], cols["weather"][i], cols["occasion"][i])
            for i in range(NUM_SEQUENCES)]


def write_conformant_dataset(root, h=2, w=3, frames=40, seed=0):
    """Full-cardinality dataset with tiny frames; every fifth sequence lacks a label."""
    rng = np.random.default_rng(seed)
    ids = []
    for i, cond in enumerate(table1_conditions(seed)):
        sid = f"seq{i:03d}"
        imgs = [rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8) for _ in range(frames)]
        label = None if i % 5 == 0 else rng.integers(0, 19, size=(h, w)).astype(np.uint8)
        rec = SequenceRecord(sid, imgs, 11, None if label is None else LabelMap(label), cond)
        write_sequence(root, rec)
        ids.append(sid)
    write_manifest(root, ids)
    return ids


def foreground_fraction(cfg):
    """Share of simulated events inside the swept mask dilated by the blur length."""
    sc = generate_synthetic(cfg)
    inside = total = 0
    for stream, swept in zip(sc.events, sc.swept):
        mask = dilate(swept, sc.blur)
        inside += int(mask[stream.y, stream.x].sum())
        total += len(stream)
    return inside, total
