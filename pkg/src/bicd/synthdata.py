"""Deterministic synthetic change-pair generation and directory I/O.

A pair is built from a shared smooth background.  "Interest" edits insert or
remove solid objects (rectangles / ellipses) and are the only thing recorded
in the ground-truth mask; "noise" edits (brightness shift, per-pixel
gaussian, sub-pixel jitter) perturb the second frame but never touch the
mask, so the generated data separates the two change kinds exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm


@dataclass
class ChangePair:
    x0: np.ndarray  # (3,H,W) float32 in [0,1]
    x1: np.ndarray  # (3,H,W) float32 in [0,1]
    y: np.ndarray   # (1,H,W) uint8 in {0,1}


@dataclass
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    n_pairs: int = 16
    object_count_range: tuple = (1, 3)
    object_kinds: tuple = ("rectangle", "ellipse")
    brightness_range: float = 0.15
    pixel_noise_sigma: float = 0.03
    jitter_px: float = 1.0
    coverage_range: tuple = (0.02, 0.30)
    max_attempts: int = 60

    def __post_init__(self):
        lo, hi = self.coverage_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("coverage range must satisfy 0 <= lo <= hi <= 1")
        if self.object_count_range[0] > self.object_count_range[1]:
            raise ValueError("object count range inverted")
        if self.image_size < 8:
            raise ValueError("image size too small")


def _smooth_background(rng, size):
    """Low-resolution color field upsampled with separable linear weights."""
    coarse = rng.uniform(0.25, 0.75, size=(3, 8, 8)).astype(np.float32)
    # nearest+linear blend along each axis, no external deps
    idx = (np.arange(size) + 0.5) * 8 / size - 0.5
    idx = np.clip(idx, 0, 7)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, 7)
    t = (idx - i0).astype(np.float32)
    rows = coarse[:, i0, :] * (1 - t)[None, :, None] + coarse[:, i1, :] * t[None, :, None]
    out = rows[:, :, i0] * (1 - t)[None, None, :] + rows[:, :, i1] * t[None, None, :]
    return out


def _rasterize_object(rng, size, kind, target_area):
    """Boolean mask of one object with roughly the requested pixel area."""
    side = math.sqrt(target_area)
    hh = min(max(2.0, side * rng.uniform(0.6, 1.5)), size * 0.9)
    ww = min(max(2.0, target_area / hh), size * 0.9)
    cy = rng.uniform(hh / 2, size - hh / 2)
    cx = rng.uniform(ww / 2, size - ww / 2)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rectangle":
        return (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
    # ellipse with matching area: pi*a*b = hh*ww
    a = hh / 2
    b = (target_area / math.pi) / max(a, 1e-6)
    b = max(b, 1.0)
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def _object_color(rng, background, mask):
    """Color with guaranteed contrast against the local background."""
    local = background[:, mask].mean(axis=1)
    for _ in range(20):
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        if np.abs(color - local).mean() >= 0.25:
            return color
    return np.clip(1.0 - local, 0.0, 1.0).astype(np.float32)


def _subpixel_shift(img, dy, dx):
    """Bilinear translation by (dy, dx) with edge replication."""
    size_h, size_w = img.shape[1], img.shape[2]
    ys = np.clip(np.arange(size_h) + dy, 0, size_h - 1)
    xs = np.clip(np.arange(size_w) + dx, 0, size_w - 1)
    y0 = np.floor(ys).astype(int)
    y1 = np.minimum(y0 + 1, size_h - 1)
    ty = (ys - y0).astype(np.float32)
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, size_w - 1)
    tx = (xs - x0).astype(np.float32)
    rows = img[:, y0, :] * (1 - ty)[None, :, None] + img[:, y1, :] * ty[None, :, None]
    return rows[:, :, x0] * (1 - tx)[None, None, :] + rows[:, :, x1] * tx[None, None, :]


def _generate_pair(rng: np.random.Generator, cfg: SynthConfig, index: int) -> ChangePair:
    size = cfg.image_size
    base = _smooth_background(rng, size)

    n_objects = int(rng.integers(cfg.object_count_range[0], cfg.object_count_range[1] + 1))
    lo, hi = cfg.coverage_range
    mask = np.zeros((size, size), dtype=bool)
    objects = []
    if n_objects > 0:
        # aim for the middle of the band; the exact rasterized area is checked
        target_cov = rng.uniform(lo + 0.2 * (hi - lo), lo + 0.7 * (hi - lo))
        for attempt in range(cfg.max_attempts):
            mask[:] = False
            objects = []
            for _ in range(n_objects):
                kind = str(rng.choice(cfg.object_kinds))
                area = target_cov * size * size / n_objects
                obj = _rasterize_object(rng, size, kind, area)
                objects.append(obj)
                mask |= obj
            cov = mask.mean()
            if lo <= cov <= hi:
                break
        else:
            raise ValueError(
                f"pair {index}: could not hit mask coverage {cfg.coverage_range} "
                f"after {cfg.max_attempts} attempts"
            )
    elif lo > 0.0:
        raise ValueError(
            f"pair {index}: zero objects requested but coverage floor is {lo}"
        )

    x0 = base.copy()
    x1 = base.copy()

    # noise edits on the second frame only; all are skipped at zero magnitude
    if cfg.jitter_px > 0:
        dy = float(rng.uniform(-cfg.jitter_px, cfg.jitter_px))
        dx = float(rng.uniform(-cfg.jitter_px, cfg.jitter_px))
        x1 = _subpixel_shift(x1, dy, dx)
    if cfg.brightness_range > 0:
        x1 = x1 + np.float32(rng.uniform(-cfg.brightness_range, cfg.brightness_range))
    if cfg.pixel_noise_sigma > 0:
        x1 = x1 + rng.normal(0.0, cfg.pixel_noise_sigma, size=x1.shape).astype(np.float32)

    # interest edits: insertion paints the object into x1, removal into x0,
    # so both appearance and disappearance directions occur
    for obj in objects:
        color = _object_color(rng, base, obj)
        if rng.random() < 0.5:
            x1[:, obj] = color[:, None]
        else:
            x0[:, obj] = color[:, None]

    x0 = np.clip(x0, 0.0, 1.0).astype(np.float32)
    x1 = np.clip(x1, 0.0, 1.0).astype(np.float32)
    y = mask[None, :, :].astype(np.uint8)
    return ChangePair(x0=x0, x1=x1, y=y)


def generate(cfg: SynthConfig) -> list:
    """Deterministic dataset: the seed fully determines every byte."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_pairs)
    return [
        _generate_pair(np.random.default_rng(children[i]), cfg, i)
        for i in range(cfg.n_pairs)
    ]


# ---------------------------------------------------------------------------
# Directory layout: <root>/{t0,t1,mask}/<stem>.{ppm,ppm,pgm}
# ---------------------------------------------------------------------------

def _to_u8(img01):
    return np.clip(np.rint(img01 * 255.0), 0, 255).astype(np.uint8)


def save_pair_dir(pairs, root):
    root = Path(root)
    for sub in ("t0", "t1", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        stem = f"pair_{i:05d}"
        netpbm.write_ppm(root / "t0" / f"{stem}.ppm", _to_u8(pair.x0).transpose(1, 2, 0))
        netpbm.write_ppm(root / "t1" / f"{stem}.ppm", _to_u8(pair.x1).transpose(1, 2, 0))
        netpbm.write_pgm(root / "mask" / f"{stem}.pgm", (pair.y[0] * 255).astype(np.uint8))


def load_pair_dir(root) -> list:
    """Load pairs sorted by stem; masks binarize at 128."""
    root = Path(root)
    for sub in ("t0", "t1", "mask"):
        if not (root / sub).is_dir():
            raise ValueError(f"{root}: missing subdirectory {sub}/")
    stems0 = {p.stem for p in (root / "t0").glob("*.ppm")}
    stems1 = {p.stem for p in (root / "t1").glob("*.ppm")}
    stemsm = {p.stem for p in (root / "mask").glob("*.pgm")}
    for stem in sorted(stems0 | stems1 | stemsm):
        for name, present in (("t0", stems0), ("t1", stems1), ("mask", stemsm)):
            if stem not in present:
                raise ValueError(f"{root}: stem {stem!r} missing from {name}/")
    pairs = []
    for stem in sorted(stems0):
        i0 = netpbm.read_ppm(root / "t0" / f"{stem}.ppm")
        i1 = netpbm.read_ppm(root / "t1" / f"{stem}.ppm")
        m = netpbm.read_pgm(root / "mask" / f"{stem}.pgm")
        if i0.shape != i1.shape or i0.shape[:2] != m.shape:
            raise ValueError(
                f"{root}: dimension mismatch for stem {stem!r}: "
                f"t0 {i0.shape}, t1 {i1.shape}, mask {m.shape}"
            )
        pairs.append(
            ChangePair(
                x0=(i0.astype(np.float32) / 255.0).transpose(2, 0, 1),
                x1=(i1.astype(np.float32) / 255.0).transpose(2, 0, 1),
                y=(m >= 128).astype(np.uint8)[None, :, :],
            )
        )
    return pairs
