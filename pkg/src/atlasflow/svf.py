"""Stationary velocity field exponentials via scaling and squaring.

A velocity field v generates a one-parameter family of maps
exp(t v); the map from time s to time t is exp((t - s) v).  Forward maps
exp(+v) pull cohort images into atlas space, inverse maps exp(-v) pull the
atlas into image space.
"""

from __future__ import annotations

import numpy as np

from .grid import DeformationMap, VectorField, compose

DEFAULT_SQUARING_STEPS = 6


def _check_steps(squaring_steps: int) -> int:
    k = int(squaring_steps)
    if k < 1:
        raise ValueError(f"squaring_steps must be >= 1, got {squaring_steps}")
    return k


def integrate(v: VectorField, squaring_steps: int = DEFAULT_SQUARING_STEPS) -> DeformationMap:
    """Exponentiate a velocity field: returns exp(v) = flow of v over unit time.

    Parameters
    ----------
    v : VectorField
        Stationary velocity, voxel units per unit time.
    squaring_steps : int
        Number K of self-compositions; the initial map is Id + v / 2**K.

    Returns
    -------
    DeformationMap
    """
    k = _check_steps(squaring_steps)
    phi = DeformationMap(VectorField(v.shape, v.vectors / float(2**k)))
    for _ in range(k):
        phi = compose(phi, phi)
    return phi


def integrate_inverse(v: VectorField, squaring_steps: int = DEFAULT_SQUARING_STEPS) -> DeformationMap:
    """Exponentiate the negated velocity: exp(-v)."""
    return integrate(VectorField(v.shape, -v.vectors), squaring_steps)


def integrate_partial(
    v: VectorField, s: float, t: float, squaring_steps: int = DEFAULT_SQUARING_STEPS
) -> DeformationMap:
    """Map from time s to time t along v, computed as exp((t - s) v).

    ``integrate_partial(v, 0, 1)`` equals ``integrate(v)`` exactly and
    ``integrate_partial(v, 1, 0)`` equals ``integrate_inverse(v)`` exactly
    (same code path, scaled velocity).
    """
    s = float(s)
    t = float(t)
    if not (np.isfinite(s) and np.isfinite(t)):
        raise ValueError("time endpoints must be finite")
    if not (0.0 <= s <= 1.0 and 0.0 <= t <= 1.0):
        raise ValueError(f"time endpoints must lie in [0, 1], got s={s}, t={t}")
    return integrate(VectorField(v.shape, (t - s) * v.vectors), squaring_steps)
