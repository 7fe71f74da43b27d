"""INI run configs: which network, which representation, scale, seed and optimizer.

Example::

    [model]
    kind = d2s          ; rgb | event | s2d | d2s (rgb_only / event_only accepted)
    repr = P+N
    scale = toy         ; toy | full
    seed = 0

    [train]
    steps = 500
    batch_size = 8
    lr = 0.05

    [d2s]
    event_target = binary_occupancy
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, fields, replace
from pathlib import Path

from .errors import ConfigError, UsageError
from .experiment import TrainConfig
from .models import MODEL_KINDS, BackboneConfig, D2SConfig, S2DConfig
from .representation import TABLE2

ALIASES = {"rgb_only": "rgb", "event_only": "event"}
# representations each model may consume; rgb takes none, d2s is supervised by frames
COMPATIBLE = {
    "rgb": (None,),
    "event": tuple(TABLE2),
    "s2d": tuple(TABLE2),
    "d2s": ("P", "P+N"),
}
DEFAULT_REPR = {"rgb": None, "event": "B2", "s2d": "B2", "d2s": "P+N"}


def check_compatible(kind, repr_name):
    """Raise :class:`UsageError` for a model/representation pair that cannot be built."""
    kind = ALIASES.get(kind, kind)
    if kind not in MODEL_KINDS:
        raise UsageError(f"unknown model {kind!r}; valid: {', '.join(MODEL_KINDS)}")
    if repr_name not in COMPATIBLE[kind]:
        if kind == "rgb":
            raise UsageError(f"model rgb takes no event representation (got {repr_name})")
        raise UsageError(f"model {kind} cannot use representation {repr_name!r}; "
                         f"valid: {', '.join(COMPATIBLE[kind])}")
    return kind


OPTIONAL_FLOATS = {"clip_norm"}
TRAIN_KEYS = ("steps", "batch_size", "lr", "momentum", "weight_decay", "clip_norm")


def _coerce(text, like, key=""):
    if text.strip().lower() == "none":
        return None
    if key in OPTIONAL_FLOATS:
        return float(text)
    if isinstance(like, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple) or like is None:
        return tuple(int(v) for v in text.replace(",", " ").split())
    return text.strip()


def _section(parser, name, obj, allowed=None):
    if not parser.has_section(name):
        return obj
    known = {f.name: getattr(obj, f.name) for f in fields(obj)
             if allowed is None or f.name in allowed}
    updates = {}
    for key, value in parser.items(name):
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}; valid: {', '.join(known)}")
        try:
            updates[key] = _coerce(value, known[key], key)
        except ValueError:
            raise ConfigError(f"[{name}] {key} = {value!r} is not a valid value") from None
    return replace(obj, **updates)


def parse_config(text, base: TrainConfig | None = None) -> TrainConfig:
    """Overlay an INI document on ``base`` (defaults when omitted)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base or TrainConfig()
    unknown = set(parser.sections()) - {"model", "train", "backbone", "loss", "s2d", "d2s"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    if parser.has_section("model"):
        m = dict(parser.items("model"))
        bad = set(m) - {"kind", "repr", "scale", "seed"}
        if bad:
            raise ConfigError(f"[model] unknown keys {sorted(bad)}")
        kind = ALIASES.get(m.get("kind", cfg.kind), m.get("kind", cfg.kind))
        repr_name = m.get("repr", cfg.repr if kind != "rgb" else None)
        if repr_name is not None and repr_name.lower() == "none":
            repr_name = None
        scale = m.get("scale", "toy" if cfg.backbone.toy_scale else "full")
        if scale not in ("toy", "full"):
            raise ConfigError(f"scale must be toy or full, got {scale!r}")
        backbone = cfg.backbone
        if (scale == "toy") != backbone.toy_scale:
            backbone = BackboneConfig.toy() if scale == "toy" else BackboneConfig()
        try:
            seed = int(m.get("seed", cfg.seed))
        except ValueError:
            raise ConfigError("[model] seed must be an integer") from None
        cfg = replace(cfg, kind=kind, repr=repr_name, seed=seed, backbone=backbone)
    try:
        cfg = _section(parser, "train", cfg, TRAIN_KEYS)
        cfg = replace(cfg,
                      backbone=_section(parser, "backbone", cfg.backbone),
                      loss=_section(parser, "loss", cfg.loss),
                      s2d=(_section(parser, "s2d", cfg.s2d or S2DConfig())
                           if parser.has_section("s2d") else cfg.s2d),
                      d2s=(_section(parser, "d2s", cfg.d2s or D2SConfig())
                           if parser.has_section("d2s") else cfg.d2s))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, base=None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


def _fmt(v):
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return "none" if v is None else str(v)


def dump_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` as INI; ``parse_config(dump_config(c)) == c``."""
    parser = configparser.ConfigParser()
    parser["model"] = {"kind": cfg.kind, "repr": _fmt(cfg.repr),
                       "scale": "toy" if cfg.backbone.toy_scale else "full",
                       "seed": str(cfg.seed)}
    parser["train"] = {k: _fmt(getattr(cfg, k))
                       for k in TRAIN_KEYS}
    parser["backbone"] = {k: _fmt(v) for k, v in asdict(cfg.backbone).items()}
    parser["loss"] = {k: _fmt(v) for k, v in asdict(cfg.loss).items()}
    for name in ("s2d", "d2s"):
        sub = getattr(cfg, name)
        if sub is not None:
            parser[name] = {k: _fmt(v) for k, v in asdict(sub).items()}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
