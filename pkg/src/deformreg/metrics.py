"""Evaluation metrics: Jaccard overlap of segmentation masks and mean
Euclidean distance between corresponding landmarks, with no-registration
baselines."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataFormatError, ShapeError
from .warp import apply_to_landmarks, warp_mask

THREADS_ENV = "DEFORMREG_THREADS"


class SegMask:
    """Binary H x W mask, values strictly in {0,1}."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values)
        if arr.ndim != 2:
            raise ShapeError(f"SegMask expects a 2-d array, got shape {tuple(arr.shape)}")
        uniq = np.unique(arr)
        if not np.all(np.isin(uniq, (0, 1))):
            raise DataFormatError(f"SegMask: values must be in {{0,1}}, got {uniq[:8]}")
        self.values = arr.astype(np.uint8)

    @property
    def shape(self):
        return self.values.shape

    def count(self):
        return int(self.values.sum())


class LandmarkSet:
    """Indexed (x, y) landmark coordinates; origin top-left, x rightward,
    y downward."""

    __slots__ = ("points", "indices")

    def __init__(self, points, indices=None):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"LandmarkSet expects [K,2] points, got shape {tuple(pts.shape)}")
        if indices is None:
            indices = np.arange(pts.shape[0])
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape != (pts.shape[0],):
            raise ShapeError("LandmarkSet: one index per point required")
        if len(np.unique(indices)) != len(indices):
            raise DataFormatError("LandmarkSet: duplicate landmark indices")
        order = np.argsort(indices)
        self.points = pts[order]
        self.indices = indices[order]

    def __len__(self):
        return self.points.shape[0]

    def validate_bounds(self, hw):
        h, w = hw
        pts = self.points
        bad = np.nonzero(
            (pts[:, 0] < 0) | (pts[:, 0] > w - 1) | (pts[:, 1] < 0) | (pts[:, 1] > h - 1)
        )[0]
        if bad.size:
            raise DataFormatError(
                f"landmarks out of bounds for image {h}x{w} at indices "
                f"{self.indices[bad].tolist()}"
            )


def _mask_values(m):
    return m.values if isinstance(m, SegMask) else SegMask(m).values


def jaccard(a, b):
    """|A intersect B| / |A union B|. Both masks empty counts as 1.0."""
    av, bv = _mask_values(a), _mask_values(b)
    if av.shape != bv.shape:
        raise ShapeError(f"jaccard: mask shapes differ: {av.shape} vs {bv.shape}")
    a_bool, b_bool = av.astype(bool), bv.astype(bool)
    union = np.count_nonzero(a_bool | b_bool)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a_bool & b_bool) / union)


def _landmark_points(lms):
    return lms.points if isinstance(lms, LandmarkSet) else np.atleast_2d(np.asarray(lms, dtype=np.float64))


def landmark_distance(warped, fixed):
    """Mean 2D Euclidean distance between index-aligned landmark sets."""
    wp, fp = _landmark_points(warped), _landmark_points(fixed)
    if wp.shape != fp.shape:
        raise ShapeError(f"landmark_distance: cardinality mismatch: {wp.shape} vs {fp.shape}")
    return float(np.mean(np.hypot(wp[:, 0] - fp[:, 0], wp[:, 1] - fp[:, 1])))


@dataclass
class MetricReport:
    pair_id: str
    dist_before: float
    dist_after: float
    jacc_before: float
    jacc_after: float
    runtime_s: float


def evaluate_pair(
    field,
    fixed_mask=None,
    moving_mask=None,
    fixed_landmarks=None,
    moving_landmarks=None,
    pair_id="pair",
    runtime_s: Optional[float] = None,
):
    """Metrics for one registered pair plus the no-registration baselines.

    Jaccard compares the warped moving mask (warp + threshold) against the
    fixed mask; distance maps the moving landmarks through the field
    inverse and compares against the fixed landmarks. When ``runtime_s``
    is not supplied, the time spent applying the field here is reported.
    Requires masks, landmarks, or both.
    """
    have_masks = fixed_mask is not None and moving_mask is not None
    have_landmarks = fixed_landmarks is not None and moving_landmarks is not None
    if not have_masks and not have_landmarks:
        raise DataFormatError("evaluate_pair: nothing to evaluate (need masks and/or landmarks)")

    dist_before = dist_after = float("nan")
    jacc_before = jacc_after = float("nan")
    t0 = time.perf_counter()
    if have_masks:
        mv = _mask_values(moving_mask)
        fv = _mask_values(fixed_mask)
        warped = warp_mask(mv, field)
        jacc_before = jaccard(mv, fv)
        jacc_after = jaccard(warped, fv)
    if have_landmarks:
        mp = _landmark_points(moving_landmarks)
        fp = _landmark_points(fixed_landmarks)
        warped_pts = apply_to_landmarks(mp, field)
        dist_before = landmark_distance(mp, fp)
        dist_after = landmark_distance(warped_pts, fp)
    elapsed = time.perf_counter() - t0
    return MetricReport(
        pair_id=pair_id,
        dist_before=dist_before,
        dist_after=dist_after,
        jacc_before=jacc_before,
        jacc_after=jacc_after,
        runtime_s=elapsed if runtime_s is None else runtime_s,
    )


def worker_count():
    """Worker cap from DEFORMREG_THREADS, defaulting to the logical cores."""
    value = os.environ.get(THREADS_ENV, "")
    if value.strip():
        try:
            n = int(value)
        except ValueError:
            raise DataFormatError(f"{THREADS_ENV} must be an integer, got {value!r}")
        if n < 1:
            raise DataFormatError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def evaluate_dataset(dataset, fields, runtimes=None):
    """Evaluate many pairs in parallel; reports merged in input order."""
    if len(fields) != len(dataset):
        raise ShapeError(f"evaluate_dataset: {len(fields)} fields for {len(dataset)} pairs")

    def one(i):
        pair = dataset[i]
        return evaluate_pair(
            fields[i],
            fixed_mask=pair.fixed_mask,
            moving_mask=pair.moving_mask,
            fixed_landmarks=pair.fixed_landmarks,
            moving_landmarks=pair.moving_landmarks,
            pair_id=pair.pair_id or f"pair_{i:03d}",
            runtime_s=None if runtimes is None else runtimes[i],
        )

    workers = min(worker_count(), len(dataset))
    if workers <= 1:
        return [one(i) for i in range(len(dataset))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(dataset))))


def reports_to_csv(reports, path):
    lines = ["pair_id,dist_before,dist_after,jacc_before,jacc_after,runtime_s"]
    for r in reports:
        lines.append(
            f"{r.pair_id},{r.dist_before:.6g},{r.dist_after:.6g},"
            f"{r.jacc_before:.6g},{r.jacc_after:.6g},{r.runtime_s:.6g}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
