"""Fixed-seed synthetic driving-like scenes with moving, motion-blurred objects.

Each scene is a static textured road background with rigid objects translating at
constant velocity. RGB frames are blurred along the motion with a trailing line
kernel (the exposure ends at the frame time), dimmed by an illumination factor and
optionally noised; labels stay crisp. Events are simulated from the clean,
unblurred frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine.ops import bilinear_matrix
from .errors import ConfigError
from .events import SimulatorConfig, simulate_events
from .metrics import NUM_CLASSES

# appearance per trainId: (rgb, shape, aspect h/w)
APPEARANCE = {
    11: ((0.92, 0.78, 0.62), "ellipse", 2.0),   # person
    12: ((0.95, 0.45, 0.40), "ellipse", 1.6),   # rider
    13: ((0.08, 0.12, 0.40), "rect", 0.6),      # car
    14: ((0.10, 0.30, 0.15), "rect", 0.8),      # truck
    15: ((0.85, 0.80, 0.15), "rect", 0.7),      # bus
    17: ((0.60, 0.10, 0.55), "diamond", 1.0),   # motorcycle
    18: ((0.95, 0.90, 0.20), "diamond", 1.0),   # bicycle
}
DEFAULT_APPEARANCE = ((0.85, 0.85, 0.85), "rect", 1.0)
ROAD_RGB = np.array([0.50, 0.45, 0.50])
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SyntheticSceneConfig:
    height: int = 64
    width: int = 64
    num_objects: int = 2
    num_frames: int = 2
    speed_range: tuple = (2.0, 5.0)
    blur_range: tuple = (0.0, 0.0)
    blur_ramp: float = 0.0
    illumination_range: tuple = (1.0, 1.0)
    size_range: tuple = (10.0, 18.0)
    palette: tuple = (0, 11, 13, 18)
    noise_std: float = 0.0
    frame_interval: float = 0.05
    contrast_threshold: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.num_frames < 2:
            raise ConfigError("need a positive canvas and at least 2 frames")
        if not 0 <= self.blur_ramp <= 1:
            raise ConfigError("blur_ramp must lie in [0, 1]")
        if self.num_objects < 0:
            raise ConfigError("num_objects must be >= 0")
        if self.size_range[1] > min(self.height, self.width):
            raise ConfigError(f"objects up to {self.size_range[1]} px do not fit "
                              f"a {self.height}x{self.width} canvas")
        if len(self.palette) < 2 and self.num_objects:
            raise ConfigError("palette needs a background class and object classes")
        if any(not 0 <= c < NUM_CLASSES for c in self.palette):
            raise ConfigError("palette entries must be trainIds 0..18")

    @property
    def background_class(self):
        return self.palette[0]

    @property
    def object_classes(self):
        return self.palette[1:]


@dataclass
class MovingObject:
    cls: int
    color: np.ndarray
    shape: str
    half_h: float
    half_w: float
    start: np.ndarray       # (y, x) at frame 0
    velocity: np.ndarray    # px / frame

    def center(self, f):
        return self.start + f * self.velocity

    def footprint(self, center, yy, xx):
        dy = (yy - center[0]) / self.half_h
        dx = (xx - center[1]) / self.half_w
        if self.shape == "ellipse":
            return dy * dy + dx * dx <= 1.0
        if self.shape == "diamond":
            return np.abs(dy) + np.abs(dx) <= 1.0
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)


@dataclass
class SyntheticScene:
    config: SyntheticSceneConfig
    frames: list            # observed RGB, H x W x 3 in [0, 1]
    clean: list             # unblurred grayscale used for events
    labels: list            # H x W uint8 trainIds
    events: list            # EventStream per adjacent pair (f-1, f)
    swept: list             # bool mask per pair: region traversed by objects
    objects: list
    blur: float
    illumination: float


def _texture(rng, h, w, cells=6):
    grid = rng.uniform(-1, 1, size=(cells, cells))
    tex = bilinear_matrix(cells, h) @ grid @ bilinear_matrix(cells, w).T
    return 0.12 * tex


def _sample_objects(cfg, rng):
    objs = []
    last = cfg.num_frames - 1
    for _ in range(cfg.num_objects):
        cls = int(rng.choice(cfg.object_classes))
        rgb, shape, aspect = APPEARANCE.get(cls, DEFAULT_APPEARANCE)
        color = np.clip(np.array(rgb) * rng.uniform(0.85, 1.15), 0, 1)
        size = rng.uniform(*cfg.size_range)
        half_h = size / 2 if aspect >= 1 else size * aspect / 2
        half_w = size / 2 / aspect if aspect >= 1 else size / 2
        speed = rng.uniform(*cfg.speed_range)
        ang = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.sin(ang), np.cos(ang)])
        anchor = np.array([rng.uniform(half_h, cfg.height - half_h),
                           rng.uniform(half_w, cfg.width - half_w)])
        objs.append(MovingObject(cls, color, shape, half_h, half_w, anchor - last * vel, vel))
    return objs


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def _render(bg, bg_class, objs, centers, yy, xx):
    img = bg.copy()
    label = np.full(bg.shape[:2], bg_class, dtype=np.uint8)
    for o, c in zip(objs, centers):
        m = o.footprint(c, yy, xx)
        img[m] = o.color
        label[m] = o.cls
    return img, label


def _swept_mask(objs, f, yy, xx):
    mask = np.zeros(yy.shape, dtype=bool)
    for o in objs:
        a, b = o.center(f - 1), o.center(f)
        steps = max(2, int(np.ceil(np.abs(b - a).max() * 4)) + 1)
        for s in np.linspace(0, 1, steps):
            mask |= o.footprint(a + s * (b - a), yy, xx)
    return mask


def dilate(mask, radius):
    """Binary dilation with a disc of the given radius."""
    r = int(np.ceil(radius))
    if r <= 0:
        return mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, r)
    out = np.zeros_like(mask)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx <= radius * radius:
                out |= padded[r + dy:r + dy + h, r + dx:r + dx + w]
    return out


def generate_synthetic(cfg: SyntheticSceneConfig) -> SyntheticScene:
    """Frames, crisp labels and per-pair event streams, fully determined by ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bg = np.clip(ROAD_RGB + _texture(rng, h, w)[:, :, None], 0, 1)
    objs = _sample_objects(cfg, rng)
    blur = float(rng.uniform(*cfg.blur_range))
    illum = float(rng.uniform(*cfg.illumination_range))
    sim = SimulatorConfig(contrast_threshold=cfg.contrast_threshold)

    frames, clean, labels = [], [], []
    for f in range(cfg.num_frames):
        sharp, label = _render(bg, cfg.background_class, objs, [o.center(f) for o in objs], yy, xx)
        if blur > 0 and objs:
            taps = int(np.ceil(blur)) + 1
            acc = np.zeros_like(sharp)
            total = 0.0
            for s in np.linspace(0, 1, taps):
                # s = 0 is the end of the exposure; ramp > 0 favours late positions
                wt = 1.0 - cfg.blur_ramp * s
                cs = [o.center(f) - s * blur * _unit(o.velocity) for o in objs]
                acc += wt * _render(bg, cfg.background_class, objs, cs, yy, xx)[0]
                total += wt
            blurred = acc / total
        else:
            blurred = sharp
        obs = illum * blurred
        if cfg.noise_std > 0:
            obs = obs + rng.normal(0, cfg.noise_std, size=obs.shape)
        frames.append(np.clip(obs, 0, 1))
        clean.append(np.clip(illum * (sharp @ LUMA), 0, 1))
        labels.append(label)

    events, swept = [], []
    for f in range(1, cfg.num_frames):
        t0, t1 = (f - 1) * cfg.frame_interval, f * cfg.frame_interval
        events.append(simulate_events(clean[f - 1], clean[f], t0, t1, sim))
        swept.append(_swept_mask(objs, f, yy, xx))
    return SyntheticScene(cfg, frames, clean, labels, events, swept, objs, blur, illum)
