"""``evseg`` command line: simulate, voxelize, train, eval, report, generate.

Failures print one JSON line ``{"error": <type>, "message": <text>}`` on stderr and
exit nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ALIASES, DEFAULT_REPR, check_compatible, dump_config, load_config
from .dataset import (Conditions, SequenceRecord, atomic_write, condition_slice, load_dataset,
                      parse_slice, read_raster, to_uint8, write_manifest, write_sequence)
from .engine import checkpoint
from .errors import EvsegError, UsageError, ValidationError
from .events import SimulatorConfig, read_events, simulate_events, write_events
from .experiment import (TrainConfig, confusion, make_model, prepare_for, split_from_records,
                         train)
from .metrics import ConfusionMatrix, LabelMap, accumulate, metrics
from .report import ResultRow, read_csv, report
from .representation import TABLE2, represent, table2_config, write_volume
from .synthetic import LUMA, SyntheticSceneConfig, generate_synthetic


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    inputs: list
    outputs: list
    version: str
    started: str
    finished: str = ""
    arguments: dict = field(default_factory=dict)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def describe_version():
    """``git describe``-style string for the source tree, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def thread_cap():
    raw = os.environ.get("EVSEG_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"EVSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"EVSEG_THREADS must be a positive integer, got {raw!r}")
    return n


def manifest_path(out):
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest_file(m: RunManifest, out):
    m.finished = _now()
    atomic_write(manifest_path(out), (json.dumps(asdict(m), indent=2, sort_keys=True)
                                      + "\n").encode())


def _manifest(args, inputs, outputs, seed=None):
    extra = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
             if k not in ("func",)}
    return RunManifest(args.command, getattr(args, "config", None), seed, [str(i) for i in inputs],
                       [str(o) for o in outputs], describe_version(), _now(), arguments=extra)


# -- simulate -------------------------------------------------------------------------

def _frame_paths(frames_dir):
    d = Path(frames_dir)
    if (d / "frames").is_dir():
        d = d / "frames"
    paths = sorted(d.glob("*.ras"))
    if not paths:
        raise ValidationError(f"no .ras frames in {frames_dir}")
    return paths


def to_gray(raster):
    a = np.asarray(raster, dtype=np.float64)
    scale = 255.0 if np.asarray(raster).dtype == np.uint8 else 65535.0
    a = a / scale
    if a.ndim == 3:
        if a.shape[2] == 3:
            return a @ LUMA
        if a.shape[2] == 1:
            return a[:, :, 0]
        raise ValidationError(f"frames need 1 or 3 channels, got {a.shape[2]}")
    return a


def select_pairs(n, mode):
    """1-based adjacent frame pairs: all of them, or only the one ending at the last frame."""
    if n < 2:
        raise ValidationError(f"need at least 2 frames, got {n}")
    if mode == "anchor":
        return [(n - 1, n)]
    return [(a, a + 1) for a in range(1, n)]


def cmd_simulate(args):
    paths = _frame_paths(args.frames)
    pairs = select_pairs(len(paths), args.pairs)
    sim = SimulatorConfig(contrast_threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dt = args.frame_interval

    def one(pair):
        a, b = pair
        f0, f1 = to_gray(read_raster(paths[a - 1])), to_gray(read_raster(paths[b - 1]))
        stream = simulate_events(f0, f1, (a - 1) * dt, (b - 1) * dt, sim)
        dest = out / f"{a:04d}_{b:04d}.evt"
        atomic_write(dest, write_events(stream, args.format))
        return dest, len(stream)

    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        results = list(pool.map(one, pairs))
    for dest, n in results:
        print(f"{dest}\t{n}")
    write_manifest_file(_manifest(args, paths, [d for d, _ in results]), out)
    return 0


# -- voxelize -------------------------------------------------------------------------

def cmd_voxelize(args):
    stream = read_events(args.events, args.format)
    h = args.height or stream.height
    w = args.width or stream.width
    vol = represent(stream, table2_config(args.repr, h, w))
    atomic_write(args.out, write_volume(vol))
    print(f"{args.out}\t{vol.data.shape[0]}x{h}x{w}\tdropped={vol.dropped}")
    write_manifest_file(_manifest(args, [args.events], [args.out]), args.out)
    return 0


# -- train / eval ---------------------------------------------------------------------

def resolve_train_config(args) -> TrainConfig:
    """Defaults, overlaid by ``--config``, overlaid by explicit flags."""
    cfg = load_config(args.config) if args.config else TrainConfig(repr=None)
    kind = ALIASES.get(args.model, args.model) or cfg.kind
    if args.repr is not None:
        repr_name = args.repr
    elif kind == "rgb":
        repr_name = None
    elif kind != cfg.kind or cfg.repr is None:
        repr_name = DEFAULT_REPR[kind]
    else:
        repr_name = cfg.repr
    check_compatible(kind, repr_name)
    updates = {"kind": kind, "repr": repr_name}
    for key in ("steps", "seed", "batch_size", "lr"):
        v = getattr(args, key)
        if v is not None:
            updates[key] = v
    return replace(cfg, **updates)


def _records(data, slice_expr=None):
    records = load_dataset(data)
    cond = parse_slice(slice_expr)
    if cond:
        records = condition_slice(records, **cond)
    return records


def _loss_csv(losses):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    keys = ["ce", "bce", "total"] if losses and "bce" in losses[0] else ["ce", "total"]
    w.writerow(["step", *keys])
    for i, terms in enumerate(losses):
        w.writerow([i, *(repr(float(terms[k])) for k in keys)])
    return out.getvalue().encode()


def cmd_train(args):
    cfg = resolve_train_config(args)
    records = [r for r in _records(args.data) if r.annotation is not None]
    if not records:
        raise ValidationError(f"{args.data}: no annotated sequences to train on")
    data = prepare_for(cfg, split_from_records(records))
    net, losses = train(cfg, data)
    ckpt = Path(args.ckpt)
    loss_path = Path(args.loss_csv) if args.loss_csv else ckpt.with_name(ckpt.name + ".loss.csv")
    cfg_path = ckpt.with_name(ckpt.name + ".cfg")
    atomic_write(ckpt, checkpoint.dumps(net.state_dict()))
    atomic_write(cfg_path, dump_config(cfg).encode())
    atomic_write(loss_path, _loss_csv(losses))
    last = losses[-1] if losses else {}
    print(f"trained {cfg.kind} repr={cfg.repr} steps={cfg.steps} "
          + " ".join(f"{k}={v:.4f}" for k, v in last.items()))
    write_manifest_file(_manifest(args, [args.data] + ([args.config] if args.config else []),
                                  [ckpt, cfg_path, loss_path], cfg.seed), ckpt)
    return 0


def load_network(ckpt):
    ckpt = Path(ckpt)
    cfg_path = ckpt.with_name(ckpt.name + ".cfg")
    if not cfg_path.exists():
        raise ValidationError(f"{ckpt}: missing config sidecar {cfg_path.name}")
    cfg = load_config(cfg_path)
    channels = table2_config(cfg.repr, 1, 1).channels if cfg.repr else 2
    net = make_model(cfg, channels)
    net.load_state_dict(checkpoint.loads(Path(ckpt).read_bytes()))
    return cfg, net


def cmd_eval(args):
    records = _records(args.data, args.slice)
    missing = [r.id for r in records if r.annotation is None]
    if missing:
        raise ValidationError(f"eval requires labels; unlabeled sequences: {', '.join(missing[:5])}")
    split = args.slice or "all"
    if args.self_predict:
        cm = ConfusionMatrix.zeros()
        for r in records:
            cm = accumulate(cm, r.annotation, r.annotation)
        model, config = "self", "-"
        inputs = [args.data]
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt (or --self-predict)")
        cfg, net = load_network(args.ckpt)
        cm = (confusion(net, prepare_for(cfg, split_from_records(records)))
              if records else ConfusionMatrix.zeros())
        model, config = cfg.kind, cfg.repr or "-"
        inputs = [args.data, args.ckpt]
    row = ResultRow.from_metrics(args.name or model, config, split, metrics(cm))
    atomic_write(args.out, report([row], format="csv"))
    sys.stdout.write(report([row]).decode())
    write_manifest_file(_manifest(args, inputs, [args.out]), args.out)
    return 0


# -- report / generate ----------------------------------------------------------------

def cmd_report(args):
    rows = []
    for path in args.inputs or []:
        rows.extend(read_csv(Path(path).read_text()))
    text = report(rows, format=args.format, fixtures=args.fixtures)
    if args.out:
        atomic_write(args.out, text)
        write_manifest_file(_manifest(args, args.inputs or [], [args.out]), args.out)
    else:
        sys.stdout.write(text.decode())
    return 0


def _pair(text):
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def cmd_generate(args):
    root = Path(args.out)
    ids = []
    for i in range(args.num):
        scfg = SyntheticSceneConfig(height=args.size, width=args.size, num_objects=args.objects,
                                    num_frames=2, blur_range=args.blur,
                                    seed=args.seed * 100003 + i)
        sc = generate_synthetic(scfg)
        rec = SequenceRecord(f"syn{i:05d}", [to_uint8(f) for f in sc.frames],
                             annotated_index=len(sc.frames),
                             annotation=LabelMap(sc.labels[-1]), conditions=Conditions())
        n = len(sc.frames)
        write_sequence(root, rec, {(n - 1, n): sc.events[-1]})
        ids.append(rec.id)
    write_manifest(root, ids)
    print(f"{root}\t{len(ids)} sequences")
    write_manifest_file(_manifest(args, [], [root], args.seed), root)
    return 0


# -- entry point ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="evseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"evseg {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="frames -> event files per adjacent pair")
    s.add_argument("frames", help="directory of .ras frames (or a sequence directory)")
    s.add_argument("--threshold", type=float, default=0.2)
    s.add_argument("--pairs", choices=("all", "anchor"), default="all")
    s.add_argument("--frame-interval", type=float, default=1.0)
    s.add_argument("--format", choices=("binary", "text"), default="binary")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("voxelize", help="event file -> dense representation")
    s.add_argument("events")
    s.add_argument("--repr", choices=tuple(TABLE2), required=True)
    s.add_argument("--format", choices=("binary", "text"), default="binary")
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("train", help="train a network on a dataset root")
    s.add_argument("--model", choices=("rgb", "event", "s2d", "d2s", "rgb_only", "event_only"))
    s.add_argument("--repr", choices=tuple(TABLE2))
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--loss-csv")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset root")
    s.add_argument("--ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--slice", help="condition filter, e.g. light=night,weather=rainy")
    s.add_argument("--self-predict", action="store_true",
                   help="use the labels as predictions (pipeline check)")
    s.add_argument("--name", help="model name written to the row")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="render metric CSVs as a table")
    s.add_argument("--in", dest="inputs", nargs="*", default=[])
    s.add_argument("--fixtures", action="store_true", help="append the published reference rows")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("generate", help="write a synthetic dataset in the sequence layout")
    s.add_argument("--out", required=True)
    s.add_argument("--num", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--objects", type=int, default=3)
    s.add_argument("--blur", type=_pair, default=(0.0, 14.0), help="lo,hi blur length in px")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_generate)
    return p


def _fail(exc, code):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; see evseg --help")
        return args.func(args)
    except UsageError as exc:
        return _fail(exc, 2)
    except (EvsegError, OSError, ValueError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
