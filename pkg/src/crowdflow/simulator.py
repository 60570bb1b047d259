"""Synthetic overhead crowd sequences with full ground truth.

Walkers follow direction-persistent random walks across a small raster;
each one is rendered as a truncated Gaussian splat on an illumination-
dependent background.  Every frame comes with exact head annotations, so
generated sequences double as training data and as evaluation truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .groundtruth import (
    HeadAnnotation, heads_by_frame, load_annotations, load_meta,
    save_annotations, save_meta,
)

__all__ = [
    "SceneConfig", "SequenceData", "ILLUMINATIONS", "ALTITUDES",
    "DENSITY_SPARSE_LIMIT", "background_image", "generate_sequence",
    "attribute_suite", "write_sequence", "load_sequence",
]

# background RGB level and splat contrast per lighting condition; heads
# read darker than daylight ground but brighter than a night scene
ILLUMINATIONS = {
    "sunny": ((0.82, 0.80, 0.72), -0.45),
    "cloudy": ((0.58, 0.58, 0.60), -0.35),
    "night": ((0.10, 0.11, 0.16), 0.35),
}

# flying height shows up only through apparent head size, in pixels
ALTITUDES = {"high": 2.0, "low": 3.5}

DENSITY_SPARSE_LIMIT = 20

SPLAT_TRUNCATION = 4.0


@dataclass(frozen=True)
class SceneConfig:
    """Geometry, population bounds and capture conditions of one scene."""

    width: int = 128
    height: int = 96
    frame_count: int = 8
    count_min: int = 6
    count_max: int = 14
    illumination: str = "cloudy"
    altitude: str = "high"
    speed_min: float = 0.5
    speed_max: float = 1.5
    heading_drift: float = 0.2

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("scene extent must be at least 8x8")
        if self.frame_count < 1:
            raise ValueError("frame_count must be positive")
        if not 0 < self.count_min <= self.count_max:
            raise ValueError("need 0 < count_min <= count_max")
        if self.illumination not in ILLUMINATIONS:
            raise ValueError(f"unknown illumination {self.illumination!r}")
        if self.altitude not in ALTITUDES:
            raise ValueError(f"unknown altitude {self.altitude!r}")

    @property
    def head_radius(self) -> float:
        return ALTITUDES[self.altitude]

    @property
    def density_label(self) -> str:
        mean = (self.count_min + self.count_max) / 2
        return "sparse" if mean < DENSITY_SPARSE_LIMIT else "crowded"

    def attributes(self) -> dict:
        return {
            "illumination": self.illumination,
            "altitude": self.altitude,
            "density": self.density_label,
        }


@dataclass
class SequenceData:
    """Rendered frames plus the annotations and metadata behind them."""

    frames: np.ndarray            # (T, 3, H, W) float64 in [0, 1]
    annotations: list
    meta: dict = field(default_factory=dict)


def background_image(config: SceneConfig) -> np.ndarray:
    """Deterministic (3, H, W) backdrop: flat level with a soft gradient."""
    base, _ = ILLUMINATIONS[config.illumination]
    xs = np.linspace(-0.5, 0.5, config.width)
    ys = np.linspace(-0.5, 0.5, config.height)
    ramp = 1.0 + 0.06 * xs[None, :] + 0.04 * ys[:, None]
    img = np.stack([b * ramp for b in base])
    return np.clip(img, 0.0, 1.0)


@dataclass
class _Walker:
    ident: int
    x: float
    y: float
    heading: float
    speed: float
    amp: float
    tint: np.ndarray


class _Population:
    """Walker pool with never-reused identities and bounded head count."""

    def __init__(self, config: SceneConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.next_ident = 0
        self.walkers: list[_Walker] = []
        start = int(rng.integers(config.count_min, config.count_max + 1))
        for _ in range(start):
            self._spawn(interior=True)

    def _appearance(self):
        amp_scale = float(self.rng.uniform(0.7, 1.3))
        tint = self.rng.uniform(0.8, 1.2, size=3)
        _, contrast = ILLUMINATIONS[self.config.illumination]
        return contrast * amp_scale, tint

    def _spawn(self, interior: bool):
        cfg = self.config
        if interior:
            x = float(self.rng.uniform(0.0, cfg.width - 1.0))
            y = float(self.rng.uniform(0.0, cfg.height - 1.0))
            heading = float(self.rng.uniform(0.0, 2.0 * math.pi))
        else:
            edge = int(self.rng.integers(4))
            along = float(self.rng.uniform())
            inward = float(self.rng.uniform(-0.6, 0.6))
            if edge == 0:    # left edge, heading roughly +x
                x, y, heading = 0.0, along * (cfg.height - 1), inward
            elif edge == 1:  # right edge
                x, y = cfg.width - 1.0, along * (cfg.height - 1)
                heading = math.pi + inward
            elif edge == 2:  # top edge, heading roughly +y
                x, y = along * (cfg.width - 1), 0.0
                heading = math.pi / 2 + inward
            else:            # bottom edge
                x, y = along * (cfg.width - 1), cfg.height - 1.0
                heading = -math.pi / 2 + inward
        amp, tint = self._appearance()
        self.walkers.append(_Walker(
            ident=self.next_ident, x=x, y=y, heading=heading,
            speed=float(self.rng.uniform(cfg.speed_min, cfg.speed_max)),
            amp=amp, tint=tint))
        self.next_ident += 1

    def _inside(self, w: _Walker) -> bool:
        cfg = self.config
        return 0.0 <= w.x <= cfg.width - 1.0 and 0.0 <= w.y <= cfg.height - 1.0

    def step(self):
        cfg, rng = self.config, self.rng
        for w in self.walkers:
            w.heading += float(rng.normal(0.0, cfg.heading_drift))
            w.x += w.speed * math.cos(w.heading)
            w.y += w.speed * math.sin(w.heading)
        survivors = [w for w in self.walkers if self._inside(w)]
        n_exited = len(self.walkers) - len(survivors)
        self.walkers = survivors
        for _ in range(n_exited):
            if len(self.walkers) < cfg.count_max and rng.uniform() < 0.8:
                self._spawn(interior=False)
        if len(self.walkers) < cfg.count_max and rng.uniform() < 0.05:
            self._spawn(interior=False)
        while len(self.walkers) < cfg.count_min:
            self._spawn(interior=False)

    def snapshot(self, frame: int):
        annotations = [HeadAnnotation(frame, w.ident, w.x, w.y)
                       for w in self.walkers]
        appearance = {w.ident: (w.amp, w.tint.copy()) for w in self.walkers}
        return annotations, appearance


def _render_frame(config: SceneConfig, annotations, appearance) -> np.ndarray:
    img = background_image(config)
    r = config.head_radius
    half = int(math.ceil(SPLAT_TRUNCATION * r))
    h, w = config.height, config.width
    for a in annotations:
        amp, tint = appearance[a.ident]
        cx, cy = int(round(a.x)), int(round(a.y))
        x0, x1 = max(cx - half, 0), min(cx + half + 1, w)
        y0, y1 = max(cy - half, 0), min(cy + half + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        dx = np.arange(x0, x1) - a.x
        dy = np.arange(y0, y1) - a.y
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        g = np.exp(-d2 / (2.0 * r * r))
        g[d2 > (SPLAT_TRUNCATION * r) ** 2] = 0.0
        img[:, y0:y1, x0:x1] += amp * tint[:, None, None] * g[None]
    return np.clip(img, 0.0, 1.0)


def generate_sequence(config: SceneConfig, seed: int,
                      name: str = "") -> SequenceData:
    """Simulate and render one sequence; identical seeds give identical data."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pop = _Population(config, rng)
    frames = np.empty((config.frame_count, 3, config.height, config.width))
    annotations: list[HeadAnnotation] = []
    for t in range(config.frame_count):
        if t > 0:
            pop.step()
        frame_ann, appearance = pop.snapshot(t)
        frames[t] = _render_frame(config, frame_ann, appearance)
        annotations.extend(frame_ann)
    meta = {
        "width": config.width,
        "height": config.height,
        "frame_count": config.frame_count,
        "attributes": config.attributes(),
        "name": name or f"seq_{seed}",
        "seed": seed,
    }
    return SequenceData(frames=frames, annotations=annotations, meta=meta)


def attribute_suite(frame_count: int = 8, width: int = 128,
                    height: int = 96) -> list[tuple[str, SceneConfig]]:
    """Six scenes covering every lighting, altitude and crowding level."""
    sparse, crowded = (6, 14), (22, 30)
    combos = [
        ("cloudy", "high", sparse),
        ("cloudy", "low", crowded),
        ("sunny", "high", crowded),
        ("sunny", "low", sparse),
        ("night", "high", sparse),
        ("night", "low", crowded),
    ]
    suite = []
    for illum, alt, (lo, hi) in combos:
        cfg = SceneConfig(width=width, height=height, frame_count=frame_count,
                          count_min=lo, count_max=hi,
                          illumination=illum, altitude=alt)
        suite.append((f"{illum}_{alt}_{cfg.density_label}", cfg))
    return suite


# ---------------------------------------------------------------------------
# on-disk layout: frames/NNNNNN.png + annotations.csv + meta.json


def write_sequence(out_dir, data: SequenceData):
    out_dir = Path(out_dir)
    frame_dir = out_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(data.frames):
        arr = np.round(frame * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(frame_dir / f"{t:06d}.png")
    save_annotations(out_dir / "annotations.csv", data.annotations)
    meta = data.meta
    save_meta(out_dir / "meta.json", meta["width"], meta["height"],
              meta["frame_count"], attributes=meta.get("attributes"),
              extra={k: v for k, v in meta.items()
                     if k not in ("width", "height", "frame_count",
                                  "attributes")})


def load_sequence(seq_dir) -> SequenceData:
    seq_dir = Path(seq_dir)
    meta = load_meta(seq_dir / "meta.json")
    annotations = load_annotations(seq_dir / "annotations.csv")
    paths = sorted((seq_dir / "frames").glob("*.png"))
    if not paths:
        raise ValueError(f"no frames under {seq_dir}")
    frames = np.stack([
        np.asarray(Image.open(p).convert("RGB"), dtype=np.float64)
        .transpose(2, 0, 1) / 255.0
        for p in paths
    ])
    return SequenceData(frames=frames, annotations=annotations, meta=meta)


def sequence_counts(data: SequenceData) -> list[int]:
    """Annotated heads per frame, in frame order."""
    return [len(f) for f in heads_by_frame(
        data.annotations, frame_count=data.frames.shape[0])]
