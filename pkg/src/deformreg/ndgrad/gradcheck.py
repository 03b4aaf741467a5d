"""Central finite-difference oracle for gradient verification.

The oracle re-evaluates the forward function from plain arrays and never
touches the tape machinery, so it stays independent of the analytic path
it checks. Use float64 inputs for the stated tolerances.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(loss_fn, arrays, wrt, coords, step=1e-3):
    """Central differences of ``loss_fn`` w.r.t. arrays[wrt] at ``coords``.

    loss_fn takes one Tensor per array and returns a scalar Tensor.
    Returns a dict {coord: derivative}.
    """
    out = {}
    for coord in coords:
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[wrt][coord] += step
        minus[wrt][coord] -= step
        f_plus = loss_fn(*[Tensor(a) for a in plus]).item()
        f_minus = loss_fn(*[Tensor(a) for a in minus]).item()
        out[coord] = (f_plus - f_minus) / (2.0 * step)
    return out


def _sample_coords(shape, count, rng):
    total = int(np.prod(shape)) if shape else 1
    if count is None or count >= total:
        idx = np.arange(total)
    else:
        idx = rng.choice(total, size=count, replace=False)
    return [np.unravel_index(i, shape) if shape else () for i in idx]


def check_gradients(
    loss_fn,
    arrays,
    wrt=None,
    step=1e-3,
    atol=1e-3,
    rtol=1e-3,
    max_coords=None,
    rng=None,
):
    """Compare analytic gradients of ``loss_fn`` against central differences.

    arrays: list of float arrays (float64 recommended); wrt: indices of the
    arrays to differentiate (default all). Each checked coordinate must
    satisfy |analytic - numeric| <= max(atol, rtol*max(|analytic|,|numeric|)).
    Returns the worst absolute deviation seen. Raises AssertionError on
    failure, reporting the offending array, coordinate and values.
    """
    rng = rng or np.random.default_rng(0)
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = loss_fn(*tensors)
    tape.backward(out)

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        coords = _sample_coords(arrays[i].shape, max_coords, rng)
        numeric = numeric_gradient(loss_fn, arrays, i, coords, step=step)
        for coord, num in numeric.items():
            ana = float(analytic[coord]) if analytic.shape else float(analytic)
            err = abs(ana - num)
            tol = max(atol, rtol * max(abs(ana), abs(num)))
            if err > tol:
                raise AssertionError(
                    f"gradient mismatch in array {i} at {coord}: "
                    f"analytic={ana:.6g} numeric={num:.6g} |diff|={err:.3g} > tol={tol:.3g}"
                )
            worst = max(worst, err)
    return worst
