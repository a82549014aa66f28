"""Synthetic stereo scenes with exact per-pixel ground truth.

A scene is a stack of fronto-parallel textured layers (background plus
rectangles/ellipses) at distinct integer disparities. The right image renders
every layer shifted left by its own disparity, far to near, so right-view
occlusion falls out of the painting order. Ground truth is the disparity of
the topmost surface at each left pixel. Pixels whose correspondence would
fall left of the right image stay flagged invalid; pixels occluded in the
right view keep their (defined) disparity and get a separate occlusion flag.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import SceneSpec
from .pfm import read_pfm, write_pfm
from .png_io import read_png, write_png
from .tensor import DTYPE


@dataclass
class StereoSample:
    """Rectified pair with dense ground truth."""

    left: np.ndarray          # [3,H,W] in [0,1]
    right: np.ndarray         # [3,H,W] in [0,1]
    gt: np.ndarray            # [H,W] disparity in pixels
    valid: np.ndarray         # [H,W] bool
    occluded: np.ndarray | None = None  # [H,W] bool, right-view occlusion
    provenance: str = "synthetic-labeled"


def _rng_for(seed: int, index: int):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))


def _texture(rng, kind: str, height: int, width: int) -> np.ndarray:
    """[3, height, width] texture canvas in [0,1].

    Noise is band-limited (correlation length a few pixels): appearance must
    survive sub-stride shifts or quarter-resolution matching has no signal.
    """
    if kind == "noise":
        from scipy.ndimage import gaussian_filter
        sigma = rng.uniform(1.0, 2.5)
        tex = gaussian_filter(rng.random((3, height, width)),
                              sigma=(0, sigma, sigma), truncate=3.0)
        lo = tex.min(axis=(1, 2), keepdims=True)
        hi = tex.max(axis=(1, 2), keepdims=True)
        tex = (tex - lo) / np.maximum(hi - lo, 1e-9)
        return tex.astype(DTYPE)
    if kind == "gradient":
        c0 = rng.random(3)
        c1 = rng.random(3)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        t = (np.cos(theta) * xx + np.sin(theta) * yy)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        return (c0[:, None, None] * (1 - t) + c1[:, None, None] * t).astype(DTYPE)
    if kind == "checker":
        c0 = rng.random(3)
        c1 = rng.random(3)
        cell = int(rng.integers(4, 13))
        oy, ox = int(rng.integers(0, cell)), int(rng.integers(0, cell))
        yy, xx = np.mgrid[0:height, 0:width]
        pattern = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
        return (c0[:, None, None] * (1 - pattern) + c1[:, None, None] * pattern).astype(DTYPE)
    raise ValueError(f"unknown texture kind {kind!r}")


def _layer_mask(rng, height: int, width: int) -> np.ndarray:
    """Random rectangle or ellipse support on the extended canvas."""
    mh = int(rng.integers(height // 5, height // 2 + 1))
    mw = int(rng.integers(width // 6, width // 3 + 1))
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    yy, xx = np.mgrid[0:height, 0:width]
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= mh // 2) & (np.abs(xx - cx) <= mw // 2)
    return ((yy - cy) / max(mh / 2, 1)) ** 2 + ((xx - cx) / max(mw / 2, 1)) ** 2 <= 1.0


def generate_sample(spec: SceneSpec, index: int) -> StereoSample:
    rng = _rng_for(spec.seed, index)
    h, w = spec.height, spec.width
    canvas_w = w + spec.disparity_max  # right view reads left-coords up to w-1+d

    # background + objects at distinct disparities, ascending (far to near);
    # the background disparity itself is spread over the lower 2/3 of the
    # range so every cost level sees supervision across the dataset
    n_layers = 1 + spec.object_count
    lo, hi = spec.disparity_min, spec.disparity_max
    if hi > lo:
        bg = int(rng.integers(lo, lo + max(1, (2 * (hi - lo)) // 3) + 1))
        room = np.arange(bg + 1, hi + 1)
        k = min(spec.object_count, room.size)
        above = rng.choice(room, size=k, replace=False) if k else np.array([], int)
        disparities = [bg] + sorted(int(d) for d in above)
    else:
        disparities = [lo] * n_layers

    left = np.zeros((3, h, w), dtype=DTYPE)
    right = np.zeros((3, h, w), dtype=DTYPE)
    gt = np.zeros((h, w), dtype=DTYPE)
    xs = np.arange(w)

    for li, d in enumerate(disparities):
        tex = _texture(rng, spec.texture, h, canvas_w)
        if li == 0:
            mask = np.ones((h, canvas_w), dtype=bool)
        else:
            mask = _layer_mask(rng, h, canvas_w)
        # left view samples the canvas at x, right view at x + d
        ml = mask[:, :w]
        left[:, ml] = tex[:, :, :w][:, ml]
        gt[ml] = d
        mr = mask[:, d:d + w]
        right[:, mr] = tex[:, :, d:d + w][:, mr]

    valid = (xs[None, :] - gt) >= 0

    # right-view z-buffer: a left pixel is occluded if a nearer surface wins
    # the right-image column it maps to
    r = (xs[None, :] - gt.astype(np.int64))
    zbuf = np.full((h, w), -1.0, dtype=np.float64)
    rows, cols = np.nonzero(valid)
    np.maximum.at(zbuf, (rows, r[rows, cols]), gt[rows, cols])
    occluded = np.zeros((h, w), dtype=bool)
    occluded[rows, cols] = gt[rows, cols] < zbuf[rows, r[rows, cols]]

    if spec.perturb_strength > 0:
        from .training import perturb
        s = StereoSample(left, right, gt, valid, occluded)
        s = perturb(s, seed=spec.seed * 7_919 + index, strength=spec.perturb_strength)
        left, right = s.left, s.right

    return StereoSample(left, right, gt, valid, occluded)


def gen_synthetic_dataset(spec: SceneSpec) -> list[StereoSample]:
    """Deterministic layered scenes; same spec and seed give identical bits."""
    return [generate_sample(spec, i) for i in range(spec.count)]


# --- dataset directory IO --------------------------------------------------------

def save_dataset(out_dir, samples: Sequence[StereoSample]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:06d}"
        write_png(out / f"{stem}_left.png", s.left)
        write_png(out / f"{stem}_right.png", s.right)
        gt = s.gt.copy()
        gt[~s.valid] = np.inf  # invalid pixels carry +inf in the PFM
        write_pfm(out / f"{stem}_disp.pfm", gt)
        if s.occluded is not None:
            write_png(out / f"{stem}_occ.png",
                      np.repeat(s.occluded[None].astype(DTYPE), 3, axis=0))


def load_dataset(in_dir, provenance: str = "synthetic-labeled") -> list[StereoSample]:
    root = Path(in_dir)
    lefts = sorted(root.glob("*_left.png"))
    if not lefts:
        raise FileNotFoundError(f"no *_left.png files under {root}")
    samples = []
    for lp in lefts:
        stem = lp.name[:-len("_left.png")]
        left = read_png(lp)
        right = read_png(root / f"{stem}_right.png")
        gt = read_pfm(root / f"{stem}_disp.pfm")
        valid = np.isfinite(gt)
        gt = np.where(valid, gt, 0.0).astype(DTYPE)
        occ_path = root / f"{stem}_occ.png"
        occluded = read_png(occ_path)[0] > 0.5 if occ_path.exists() else None
        samples.append(StereoSample(left, right, gt, valid, occluded, provenance))
    return samples
