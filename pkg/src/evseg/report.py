"""Result tables: CSV metric files and aligned text rendering."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .metrics import CLASS_NAMES, FOREGROUND, NUM_CLASSES

CSV_HEADER = ["model", "config", "split", "acc", "miou", "fwiou", *CLASS_NAMES]
FG_ABBREV = ("TLi", "TSi", "Ped", "Rid", "Car", "Tru", "Bus", "Tra", "Mot", "Bic")


@dataclass
class ResultRow:
    """One evaluated (model, config, split); metric values are fractions in [0, 1]."""

    model: str
    config: str
    split: str
    acc: float | None = None
    miou: float | None = None
    fwiou: float | None = None
    per_class_iou: list = field(default_factory=lambda: [None] * NUM_CLASSES)

    @classmethod
    def from_metrics(cls, model, config, split, m):
        return cls(model, config, split, m["acc"], m["miou"], m["fwiou"], list(m["per_class_iou"]))


def _pct(*vals):
    return tuple(None if v is None else v / 100 for v in vals)


def _fixture_rows():
    rows = []
    table2 = [
        ("SwiftNet", "Event B=1", 35.6, 2.3),
        ("SwiftNet", "Event B=2", 36.0, 19.7),
        ("SwiftNet", "Event B=18", 36.6, 19.8),
        ("SwiftNet", "RGB", 69.2, 20.1),
        ("ISSAFE-RFNet", "s2d B=1", 68.3, 16.7),
        ("ISSAFE-RFNet", "s2d B=2", 68.4, 23.0),
        ("ISSAFE-RFNet", "s2d B=18", 67.1, 10.4),
        ("ISSAFE-SwiftNet", "d2s P", 69.0, 24.5),
        ("ISSAFE-SwiftNet", "d2s P+N", 69.4, 28.3),
    ]
    for model, cfg, src, tgt in table2:
        rows.append(ResultRow(model, cfg, "source", miou=src / 100))
        rows.append(ResultRow(model, cfg, "target", miou=tgt / 100))
    # foreground IoU (Target) | Target-512 | Source | Target  as Acc, mIoU, fwIoU
    table3 = [
        ("CLAN", "-", (15.2, 5.3, 4.0, 3.4, 32.6, 8.8, 28.8, None, 4.2, 0.1),
         (34.0, 19.4, 45.5), (56.3, 43.7, 77.2), (28.1, 16.8, 38.3)),
        ("CLAN", "f", (17.2, 21.5, 8.4, 6.3, 63.5, 33.4, 33.1, None, 3.7, 6.2),
         (46.3, 31.7, 67.2), (70.4, 62.4, 87.0), (40.1, 28.8, 63.8)),
        ("CLAN", "f+i", (17.0, 20.0, 9.4, 5.2, 64.3, 36.8, 35.9, None, 5.6, 7.7),
         (47.3, 32.4, 66.3), (73.2, 64.8, 87.3), (39.4, 28.2, 60.6)),
        ("DOF-CLAN", "f+i", (18.1, 17.7, 9.5, 8.1, 64.3, 34.8, 34.9, None, 5.1, 7.3),
         (48.3, 33.4, 69.6), (71.6, 62.9, 87.4), (40.9, 29.2, 64.3)),
        ("ISSAFE-CLAN", "f+i", (17.0, 19.5, 10.0, 8.8, 65.6, 39.5, 39.7, None, 6.1, 7.0),
         (48.2, 33.1, 68.2), (73.2, 63.9, 87.5), (42.1, 30.0, 64.5)),
    ]
    for model, level, fg, t512, src, tgt in table3:
        per = [None] * NUM_CLASSES
        for cls, v in zip(FOREGROUND, _pct(*fg)):
            per[cls] = v
        rows.append(ResultRow(model, level, "target-512", *_pct(*t512)))
        rows.append(ResultRow(model, level, "source", *_pct(*src)))
        rows.append(ResultRow(model, level, "target", *_pct(*tgt), per_class_iou=per))
    return rows


FIXTURE_ROWS = _fixture_rows()


def _cell(v, fmt):
    return "" if v is None else format(v, fmt)


def report(rows, format="text", fixtures=False) -> bytes:
    """Render rows (optionally followed by the published reference rows)."""
    rows = list(rows) + (FIXTURE_ROWS if fixtures else [])
    if format == "csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.model, r.config, r.split, _cell(r.acc, ".6f"), _cell(r.miou, ".6f"),
                        _cell(r.fwiou, ".6f"), *(_cell(v, ".6f") for v in r.per_class_iou)])
        return out.getvalue().encode()
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    header = ["Model", "Config", "Split", "Acc", "mIoU", "fwIoU", *FG_ABBREV]
    body = []
    for r in rows:
        pct = [None if v is None else 100 * v for v in (r.acc, r.miou, r.fwiou)]
        fg = [None if r.per_class_iou[c] is None else 100 * r.per_class_iou[c] for c in FOREGROUND]
        body.append([r.model, r.config, r.split,
                     *(("-" if v is None else f"{v:.1f}") for v in pct + fg)])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def line(cells):
        left = [c.ljust(w) for c, w in zip(cells[:3], widths[:3])]
        right = [c.rjust(w) for c, w in zip(cells[3:], widths[3:])]
        return "  ".join(left + right).rstrip()

    lines = [line(header), "  ".join("-" * w for w in widths)] + [line(b) for b in body]
    return ("\n".join(lines) + "\n").encode()


def read_csv(source) -> list:
    text = source.decode() if isinstance(source, bytes) else source
    rows = []
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return rows
    if header != CSV_HEADER:
        raise ValueError("unexpected CSV header")

    def num(s):
        return None if s == "" else float(s)

    for rec in reader:
        rows.append(ResultRow(rec[0], rec[1], rec[2], num(rec[3]), num(rec[4]), num(rec[5]),
                              [num(s) for s in rec[6:]]))
    return rows
