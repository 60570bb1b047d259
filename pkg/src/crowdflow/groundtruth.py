"""Ground-truth synthesis from head annotations.

Density maps splat one renormalized Gaussian per head, so each head
contributes exactly unit mass no matter how the kernel is truncated or
clipped at the borders.  Localization maps put a peak of 1 at each head's
nearest pixel and resolve overlaps with a pointwise max.  Multi-scale
targets are regenerated from rescaled coordinates, never by downsampling
a finer map.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "HeadAnnotation", "density_map", "localization_map", "multiscale_targets",
    "adaptive_sigmas", "hflip", "augment", "split_patches",
    "save_annotations", "load_annotations", "save_meta", "load_meta",
    "heads_by_frame", "trajectories",
]

SIGMA_TRUNCATION = 4.0  # kernel support radius, in sigmas


@dataclass(frozen=True)
class HeadAnnotation:
    """One annotated head center, in pixel units with integer pixel centers."""

    frame: int
    ident: int
    x: float
    y: float


def _validate_heads(heads, width, height):
    pts = np.asarray(heads, dtype=np.float64).reshape(-1, 2)
    for i, (x, y) in enumerate(pts):
        if not (0.0 <= x < width and 0.0 <= y < height):
            raise ValueError(
                f"head {i} at ({x}, {y}) lies outside the {width}x{height} raster"
            )
    return pts


def adaptive_sigmas(points, beta=0.3, k_neighbors=3, sigma_fixed=4.0,
                    sigma_min=1.0, sigma_max=16.0):
    """Geometry-adaptive kernel widths: beta times the mean distance to the
    nearest neighbors, clamped.  A lone head falls back to the fixed width."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    m = len(pts)
    if m == 0:
        return np.zeros(0)
    if m == 1:
        return np.array([sigma_fixed])
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    k = min(k_neighbors, m - 1)
    nearest = np.sort(dist, axis=1)[:, :k]
    sig = beta * nearest.mean(axis=1)
    return np.clip(sig, sigma_min, sigma_max)


def _splat_gaussian(out, x, y, sigma):
    """Add one unit-mass discretized Gaussian centered at (x, y)."""
    h, w = out.shape
    r = SIGMA_TRUNCATION * sigma
    # the floor/ceil orientation keeps the window nonempty for any
    # sigma, so no head can vanish from a coarse map
    i0 = max(int(np.floor(x - r)), 0)
    i1 = min(int(np.ceil(x + r)), w - 1)
    j0 = max(int(np.floor(y - r)), 0)
    j1 = min(int(np.ceil(y + r)), h - 1)
    ii = np.arange(i0, i1 + 1, dtype=np.float64)
    jj = np.arange(j0, j1 + 1, dtype=np.float64)
    kernel = np.exp(-((jj[:, None] - y) ** 2 + (ii[None, :] - x) ** 2)
                    / (2.0 * sigma * sigma))
    out[j0:j1 + 1, i0:i1 + 1] += kernel / kernel.sum()


def density_map(heads, width, height, adaptive=True, sigma_fixed=4.0,
                beta=0.3, k_neighbors=3, sigma_min=1.0, sigma_max=16.0,
                sigmas=None) -> np.ndarray:
    """Continuous crowd density whose integral equals the head count.

    ``sigmas`` overrides the per-head widths; otherwise they come from the
    adaptive rule (or ``sigma_fixed`` when ``adaptive`` is off).
    """
    if width < 1 or height < 1:
        raise ValueError(f"map extents must be positive, got {width}x{height}")
    pts = _validate_heads(heads, width, height)
    if sigmas is None:
        if adaptive:
            sigmas = adaptive_sigmas(pts, beta, k_neighbors, sigma_fixed,
                                     sigma_min, sigma_max)
        else:
            sigmas = np.full(len(pts), float(sigma_fixed))
    else:
        sigmas = np.asarray(sigmas, dtype=np.float64)
        if len(sigmas) != len(pts):
            raise ValueError("one sigma per head required")
    out = np.zeros((height, width))
    for (x, y), sig in zip(pts, sigmas):
        _splat_gaussian(out, x, y, sig)
    return out


def localization_map(heads, width, height, sigma_loc=3.0) -> np.ndarray:
    """Per-head Gaussian peaks of height 1, overlaps resolved by max."""
    if sigma_loc <= 0:
        raise ValueError("sigma_loc must be positive")
    pts = _validate_heads(heads, width, height)
    out = np.zeros((height, width))
    r = SIGMA_TRUNCATION * sigma_loc
    for x, y in pts:
        # the peak sits on the nearest pixel so its value is exactly 1
        cx = min(int(round(x)), width - 1)
        cy = min(int(round(y)), height - 1)
        i0 = max(int(np.ceil(cx - r)), 0)
        i1 = min(int(np.floor(cx + r)), width - 1)
        j0 = max(int(np.ceil(cy - r)), 0)
        j1 = min(int(np.floor(cy + r)), height - 1)
        ii = np.arange(i0, i1 + 1, dtype=np.float64)
        jj = np.arange(j0, j1 + 1, dtype=np.float64)
        kernel = np.exp(-((jj[:, None] - cy) ** 2 + (ii[None, :] - cx) ** 2)
                        / (2.0 * sigma_loc * sigma_loc))
        region = out[j0:j1 + 1, i0:i1 + 1]
        np.maximum(region, kernel, out=region)
    return out


def multiscale_targets(heads, width, height, n_scales=4, sigma_loc=3.0,
                       adaptive=True, sigma_fixed=4.0, beta=0.3,
                       k_neighbors=3, sigma_min=1.0, sigma_max=16.0):
    """Density and localization pyramids, coarse to fine.

    Scale ``s`` (1-based) has extents (width, height) / 2**(n_scales - s).
    Coordinates and kernel widths are divided by the same factor, so every
    scale is generated directly from the annotations.
    """
    if n_scales < 1:
        raise ValueError("need at least one scale")
    divisor = 2 ** (n_scales - 1)
    if width % divisor or height % divisor:
        raise ValueError(
            f"extents {width}x{height} must be divisible by {divisor} "
            f"for {n_scales} scales"
        )
    pts = _validate_heads(heads, width, height)
    if adaptive:
        base_sigmas = adaptive_sigmas(pts, beta, k_neighbors, sigma_fixed,
                                      sigma_min, sigma_max)
    else:
        base_sigmas = np.full(len(pts), float(sigma_fixed))
    densities, locs = [], []
    for s in range(1, n_scales + 1):
        f = 2 ** (n_scales - s)
        ws, hs = width // f, height // f
        scaled = pts / f
        densities.append(density_map(scaled, ws, hs, sigmas=base_sigmas / f))
        locs.append(localization_map(scaled, ws, hs, sigma_loc=sigma_loc / f))
    return densities, locs


# ---------------------------------------------------------------------------
# augmentation


def hflip(frames, heads_per_frame, width):
    """Mirror frames and head x coordinates about the vertical pixel-center axis."""
    flipped = [np.ascontiguousarray(f[..., ::-1]) for f in frames]
    out_heads = [[(width - 1.0 - x, y, ident) for x, y, ident in hs]
                 for hs in heads_per_frame]
    return flipped, out_heads


def augment(frames, heads_per_frame, rng, crop=None, flip_prob=0.5):
    """Random horizontal flip plus random crop, identical on every frame.

    ``frames`` is a sequence of (channels, height, width) arrays sharing one
    extent; ``heads_per_frame`` holds (x, y, ident) triples per frame.  Heads
    falling outside the crop are dropped.  Fully deterministic given the
    generator state.
    """
    frames = list(frames)
    h, w = frames[0].shape[-2:]
    for f in frames:
        if f.shape[-2:] != (h, w):
            raise ValueError("all frames must share one extent")
    heads = [list(hs) for hs in heads_per_frame]
    if rng.random() < flip_prob:
        frames, heads = hflip(frames, heads, w)
    if crop is not None:
        cw, ch = crop
        if cw > w or ch > h:
            raise ValueError(f"crop {cw}x{ch} exceeds frame extent {w}x{h}")
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        frames = [np.ascontiguousarray(f[..., y0:y0 + ch, x0:x0 + cw])
                  for f in frames]
        heads = [
            [(x - x0, y - y0, ident) for x, y, ident in hs
             if x0 <= x < x0 + cw and y0 <= y < y0 + ch]
            for hs in heads
        ]
    return frames, heads


def split_patches(frame, heads):
    """Quarter a frame into its 2x2 grid of equal patches.

    Returns four (patch, heads) pairs in row-major order; head coordinates
    are re-expressed in patch-local pixels.
    """
    h, w = frame.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"extents {w}x{h} must be even to split into 2x2 patches")
    hw, hh = w // 2, h // 2
    out = []
    for gy in range(2):
        for gx in range(2):
            patch = np.ascontiguousarray(
                frame[..., gy * hh:(gy + 1) * hh, gx * hw:(gx + 1) * hw])
            local = [(x - gx * hw, y - gy * hh, ident) for x, y, ident in heads
                     if gx * hw <= x < (gx + 1) * hw and gy * hh <= y < (gy + 1) * hh]
            out.append((patch, local))
    return out


# ---------------------------------------------------------------------------
# annotation files


def save_annotations(path, annotations):
    path = Path(path)
    rows = sorted(annotations, key=lambda a: (a.frame, a.ident))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "id", "x", "y"])
        for a in rows:
            writer.writerow([a.frame, a.ident, repr(float(a.x)), repr(float(a.y))])


def load_annotations(path) -> list[HeadAnnotation]:
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "id", "x", "y"]:
            raise ValueError(f"{path}: expected header frame,id,x,y, got {header}")
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            frame, ident = int(row[0]), int(row[1])
            if (frame, ident) in seen:
                raise ValueError(
                    f"{path}:{lineno}: duplicate identity {ident} in frame {frame}"
                )
            seen.add((frame, ident))
            out.append(HeadAnnotation(frame, ident, float(row[2]), float(row[3])))
    return out


def save_meta(path, width, height, frame_count, attributes=None, extra=None):
    doc = {
        "width": int(width),
        "height": int(height),
        "frame_count": int(frame_count),
        "attributes": attributes or {},
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_meta(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for key in ("width", "height", "frame_count"):
        if key not in doc:
            raise ValueError(f"{path}: missing required key {key!r}")
    return doc


def heads_by_frame(annotations, frame_count=None):
    """Group annotations into per-frame (x, y, ident) lists."""
    if frame_count is None:
        frame_count = max((a.frame for a in annotations), default=-1) + 1
    frames = [[] for _ in range(frame_count)]
    for a in annotations:
        if 0 <= a.frame < frame_count:
            frames[a.frame].append((a.x, a.y, a.ident))
    return frames


def trajectories(annotations) -> dict[int, dict[int, tuple[float, float]]]:
    """Group annotations by identity: ident -> {frame: (x, y)}."""
    out: dict[int, dict[int, tuple[float, float]]] = {}
    for a in annotations:
        out.setdefault(a.ident, {})[a.frame] = (a.x, a.y)
    return out
