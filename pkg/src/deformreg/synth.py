"""Seeded synthetic registration pairs with exact ground truth.

Each pair starts from a procedurally textured base image B and a drawn
displacement field g. The moving image is B itself and the fixed image is
B warped by g, so g satisfies moving(x + g(x)) == fixed(x) by construction
and serves directly as the ground-truth registration field: photometric
self-consistency, endpoint-error and landmark oracles are exact rather
than approximate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .engine import PairDataset, RegPair
from .formats import (
    read_field,
    read_image,
    read_landmarks,
    read_mask,
    write_field,
    write_image,
    write_landmarks,
    write_mask,
)
from .metrics import LandmarkSet
from .warp import bilinear_warp, sample_field_at

MANIFEST_NAME = "dataset.json"
MANIFEST_VERSION = 1


class DeformFamily(Enum):
    TRANSLATION = "translation"
    ROTATION = "rotation"
    GAUSSIAN_BUMPS = "gaussian_bumps"


@dataclass
class SynthSpec:
    """Recipe for one synthetic dataset."""

    base: str = "blobs"  # procedural pattern id or a .pgm path
    family: DeformFamily = DeformFamily.GAUSSIAN_BUMPS
    max_displacement: float = 4.0
    pair_count: int = 20
    seed: int = 0
    noise_sigma: float = 0.0
    image_hw: tuple = (64, 64)

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = DeformFamily(self.family)
        self.image_hw = tuple(int(v) for v in self.image_hw)
        if self.pair_count < 1:
            raise ConfigError(f"pair_count must be >= 1, got {self.pair_count}")
        if not 0.0 <= self.noise_sigma <= 0.1:
            raise ConfigError(f"noise_sigma must be in [0, 0.1], got {self.noise_sigma}")
        limit = min(self.image_hw) / 8.0
        if not 0.0 < self.max_displacement < limit:
            raise ConfigError(
                f"max_displacement must be in (0, {limit}) for {self.image_hw}, "
                f"got {self.max_displacement}"
            )

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            doc = json.load(f)
        known = {"base", "family", "max_displacement", "pair_count", "seed", "noise_sigma", "image_hw"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{path}: unknown synth keys {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}")

    def to_dict(self):
        return {
            "base": self.base,
            "family": self.family.value,
            "max_displacement": self.max_displacement,
            "pair_count": self.pair_count,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "image_hw": list(self.image_hw),
        }


# ---------------------------------------------------------------------------
# procedural base patterns
# ---------------------------------------------------------------------------


def _fourier_texture(rng, hw, modes=16, amplitude=0.32):
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for _ in range(modes):
        fx = rng.uniform(-4.5, 4.5) / w
        fy = rng.uniform(-4.5, 4.5) / h
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
    tex *= amplitude / max(np.max(np.abs(tex)), 1e-9)
    return tex


def _ellipse_shape(rng, hw):
    """Smooth 0..1 ramp of a jittered ellipse: the organ-like foreground."""
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h * rng.uniform(0.45, 0.55)
    cx = w * rng.uniform(0.45, 0.55)
    ry = h * rng.uniform(0.28, 0.36)
    rx = w * rng.uniform(0.28, 0.36)
    q = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
    softness = 0.08
    return 1.0 / (1.0 + np.exp((q - 1.0) / softness))


def _checker_texture(hw):
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return 0.25 * np.sin(2 * np.pi * xs / 16.0) * np.sin(2 * np.pi * ys / 16.0)


def make_base(rng, hw, pattern):
    """Build (intensity image, shape image) for one pair.

    The shape image is a smooth foreground ramp whose 0.5 level set
    defines the segmentation masks. Intensities stay inside (0,1) without
    clipping so warped resamples stay smooth.
    """
    if pattern == "blobs":
        shape = _ellipse_shape(rng, hw)
        tex = _fourier_texture(rng, hw)
        base = 0.4 + 0.2 * shape + tex
    elif pattern == "checker":
        shape = _ellipse_shape(rng, hw)
        base = 0.5 + 0.2 * shape + _checker_texture(hw)
    else:
        img = read_image(pattern)
        if img.shape != tuple(hw):
            raise ConfigError(
                f"base image {pattern} is {img.shape}, spec wants {tuple(hw)}"
            )
        return img.pixels.astype(np.float64), img.pixels.astype(np.float64)
    return base, shape


# ---------------------------------------------------------------------------
# ground-truth field families
# ---------------------------------------------------------------------------


def _draw_translation(rng, hw, limit):
    h, w = hw
    angle = rng.uniform(0, 2 * np.pi)
    mag = rng.uniform(0.25, 1.0) * limit
    field = np.empty((h, w, 2), dtype=np.float64)
    field[..., 0] = mag * np.cos(angle)
    field[..., 1] = mag * np.sin(angle)
    return field


def _draw_rotation(rng, hw, limit):
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = np.sqrt(max(cx, cy) ** 2 * 2)
    theta = rng.uniform(0.3, 1.0) * limit / radius * rng.choice((-1.0, 1.0))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rel_x, rel_y = xs - cx, ys - cy
    field = np.empty((h, w, 2), dtype=np.float64)
    field[..., 0] = cos_t * rel_x - sin_t * rel_y - rel_x
    field[..., 1] = sin_t * rel_x + cos_t * rel_y - rel_y
    return field


def _draw_bumps(rng, hw, limit):
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w, 2), dtype=np.float64)
    for _ in range(rng.integers(1, 4)):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        sigma = rng.uniform(4.0, 12.0)
        amp = rng.uniform(0.3, 1.0) * limit
        angle = rng.uniform(0, 2 * np.pi)
        bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
        field[..., 0] += amp * np.cos(angle) * bump
        field[..., 1] += amp * np.sin(angle) * bump
    mag = np.hypot(field[..., 0], field[..., 1])
    peak = float(np.max(mag))
    if peak > 0:
        target = rng.uniform(0.7, 1.0) * limit
        field *= target / peak
    return field


def draw_field(family, rng, hw, limit):
    if family is DeformFamily.TRANSLATION:
        field = _draw_translation(rng, hw, limit)
    elif family is DeformFamily.ROTATION:
        field = _draw_rotation(rng, hw, limit)
    else:
        field = _draw_bumps(rng, hw, limit)
    peak = float(np.max(np.hypot(field[..., 0], field[..., 1])))
    assert peak <= limit + 1e-6, f"field generator bug: max |u| {peak} > limit {limit}"
    return field


def _grid_landmarks(hw):
    h, w = hw
    pts = []
    for fy in (0.25, 0.5, 0.75):
        for fx in (0.25, 0.5, 0.75):
            pts.append((fx * (w - 1), fy * (h - 1)))
    return np.asarray(pts, dtype=np.float64)


def _warp_np(image, field):
    return bilinear_warp(image.astype(np.float64), field).data


def generate_synthetic(spec, out_dir):
    """Write a fully seeded dataset to ``out_dir``; returns the manifest dict.

    Per pair: fixed/moving 16-bit PGMs, the ground-truth DFF field,
    fixed/moving masks, and fixed/moving landmark CSVs (a 3x3 interior
    grid mapped through the field). Identical spec + seed reproduce the
    dataset bit for bit.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hw = spec.image_hw
    limit = float(spec.max_displacement)
    children = np.random.SeedSequence(spec.seed).spawn(spec.pair_count)
    entries = []
    for i in range(spec.pair_count):
        rng = np.random.default_rng(children[i])
        base, shape = make_base(rng, hw, spec.base)
        g = draw_field(spec.family, rng, hw, limit)

        moving = base
        fixed = _warp_np(base, g)
        moving_mask = (shape > 0.5).astype(np.uint8)
        # the fixed mask is the moving mask carried through g exactly as
        # warp_mask does it, so the mask oracle is exact under the gt field
        fixed_mask = (_warp_np(moving_mask.astype(np.float64), g) >= 0.5).astype(np.uint8)

        fixed_pts = _grid_landmarks(hw)
        moving_pts = fixed_pts + sample_field_at(g, fixed_pts)

        if spec.noise_sigma > 0:
            fixed = fixed + rng.normal(0.0, spec.noise_sigma, fixed.shape)
            moving = moving + rng.normal(0.0, spec.noise_sigma, moving.shape)
        fixed = np.clip(fixed, 0.0, 1.0)
        moving = np.clip(moving, 0.0, 1.0)

        pid = f"pair_{i:04d}"
        files = {
            "fixed": f"{pid}_fixed.pgm",
            "moving": f"{pid}_moving.pgm",
            "field": f"{pid}_field.dff",
            "fixed_mask": f"{pid}_fixed_mask.pgm",
            "moving_mask": f"{pid}_moving_mask.pgm",
            "fixed_landmarks": f"{pid}_fixed_lm.csv",
            "moving_landmarks": f"{pid}_moving_lm.csv",
        }
        write_image(out / files["fixed"], fixed.astype(np.float32))
        write_image(out / files["moving"], moving.astype(np.float32))
        write_field(out / files["field"], g.astype(np.float32))
        write_mask(out / files["fixed_mask"], fixed_mask)
        write_mask(out / files["moving_mask"], moving_mask)
        write_landmarks(out / files["fixed_landmarks"], LandmarkSet(fixed_pts))
        write_landmarks(out / files["moving_landmarks"], LandmarkSet(moving_pts))
        entries.append({"id": pid, **files})

    manifest = {
        "version": MANIFEST_VERSION,
        "spec": spec.to_dict(),
        "pairs": entries,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(data_dir):
    """Load a generated dataset directory into a PairDataset."""
    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataFormatError(f"{root}: no {MANIFEST_NAME} manifest found")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataFormatError(f"{manifest_path}: unsupported manifest version {manifest.get('version')}")
    pairs = []
    for entry in manifest["pairs"]:
        fixed = read_image(root / entry["fixed"])
        pairs.append(
            RegPair(
                fixed=fixed,
                moving=read_image(root / entry["moving"]),
                gt_field=read_field(root / entry["field"]),
                fixed_mask=read_mask(root / entry["fixed_mask"]).values,
                moving_mask=read_mask(root / entry["moving_mask"]).values,
                fixed_landmarks=read_landmarks(root / entry["fixed_landmarks"], fixed.shape),
                moving_landmarks=read_landmarks(root / entry["moving_landmarks"], fixed.shape),
                pair_id=entry["id"],
            )
        )
    return PairDataset(pairs)
