import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def fractional_field(rng, h, w, lo=0.2, hi=0.8, scale=1.0):
    """Random field whose sample points stay away from integer grid lines
    (bilinear kinks) and from the image border clamp."""
    mag = rng.uniform(lo, hi, (h, w, 2))
    sign = np.where(rng.random((h, w, 2)) < 0.5, -1.0, 1.0)
    return mag * sign * scale


def smooth_bump_field(rng, h, w, max_disp):
    """Sum of a few gentle Gaussian displacement bumps, capped at max_disp.

    Sigmas are kept large enough that the inverse field's strain stays
    well below 1, where fixed-point inversion is contractive.
    """
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w, 2))
    for _ in range(3):
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        sigma = rng.uniform(8.0, 14.0)
        angle = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.4, 1.0)
        bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
        field[..., 0] += amp * np.cos(angle) * bump
        field[..., 1] += amp * np.sin(angle) * bump
    peak = np.max(np.hypot(field[..., 0], field[..., 1]))
    if peak > 0:
        field *= max_disp / peak
    return field
