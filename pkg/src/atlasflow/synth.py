"""Deterministic synthetic cohorts with known ground-truth correspondences.

A fixed nested-structure template is deformed once per member by a random
affine map composed with a random smooth stationary-velocity flow, so every
member ships with exact forward/inverse ground-truth maps.  Per-member
randomness comes from an independent child seed (spawned from the cohort
seed), so member i is reproducible regardless of cohort size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigInfeasibleError, DegenerateIntensityError
from .evaluation import count_folds
from .grid import (
    DeformationMap,
    GridShape,
    LabelField,
    ScalarField,
    VectorField,
    compose,
    identity_coords,
    warp,
    warp_labels,
)
from .svf import integrate, integrate_inverse

MAX_REJECTIONS = 100

# per-structure center offsets (fractions of the smallest extent), cycled
_OFFSETS = [(0.0, 0.0, 0.0), (0.05, -0.03, 0.02), (-0.04, 0.05, -0.03)]


@dataclass(frozen=True)
class SynthConfig:
    """Cohort geometry and randomness knobs."""

    dims: tuple = (64, 64)
    cohort_size: int = 8
    structures: int = 3
    velocity_scale: float = 3.0
    smoothness: float = 6.0
    affine_scale: float = 0.08
    noise_sigma: float = 0.02
    seed: int = 17

    def __post_init__(self):
        GridShape(self.dims)  # validates dimensionality and extents
        if self.cohort_size < 2:
            raise ValueError("cohort_size must be >= 2")
        if self.structures < 1:
            raise ValueError("structures must be >= 1")
        for name in ("velocity_scale", "affine_scale", "noise_sigma"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if not np.isfinite(self.smoothness) or self.smoothness <= 0:
            raise ValueError(f"smoothness must be finite and > 0, got {self.smoothness}")


@dataclass
class SynthResult:
    """Generated cohort plus the template and exact ground-truth maps."""

    images: list
    labels: list
    template: ScalarField
    template_labels: LabelField
    fwd_maps: list  # pull member i into template space
    inv_maps: list  # pull the template into member i's space


def normalize_intensity(image: ScalarField) -> ScalarField:
    """Map the 0.1th/99.9th intensity percentiles to 0/1, then clamp.

    Percentiles use linear interpolation of the sorted order statistics.
    Raises DegenerateIntensityError on (near-)constant input.
    """
    lo, hi = np.percentile(image.values, [0.1, 99.9])
    if hi - lo <= 1e-12:
        raise DegenerateIntensityError(
            f"percentile range degenerate: [{lo:.6g}, {hi:.6g}]"
        )
    return ScalarField(image.shape, np.clip((image.values - lo) / (hi - lo), 0.0, 1.0))


def make_template(dims: tuple, structures: int):
    """Nested soft-edged structures with distinct intensities.

    Returns the (unnormalized) intensity image and the crisp label field.
    """
    shape = GridShape(dims)
    d = shape.ndim
    coords = identity_coords(shape)
    center = (np.array(dims, dtype=np.float64) - 1.0) / 2.0
    scale = float(min(dims))
    labels = np.zeros(dims, dtype=np.int64)
    values = np.full(dims, 0.08)
    for k in range(1, structures + 1):
        off = np.array(_OFFSETS[(k - 1) % len(_OFFSETS)][:d]) * scale
        radius = 0.36 * 0.70 ** (k - 1) * scale
        semi = np.array([radius, 0.78 * radius, 0.85 * radius][:d])
        dist = np.zeros(dims)
        for a in range(d):
            dist += ((coords[..., a] - center[a] - off[a]) / semi[a]) ** 2
        inside = dist <= 1.0
        labels[inside] = k
        values[inside] = 0.08 + 0.84 * k / structures
    smoothed = gaussian_filter(values, sigma=1.2, mode="nearest")
    return ScalarField(shape, smoothed), LabelField(shape, labels, structures)


def _random_affine(rng: np.random.Generator, shape: GridShape, scale: float):
    """Small random log-scale/rotation/shear/translation about the grid center."""
    d = shape.ndim
    log_s = rng.uniform(-scale, scale, size=d)
    mat = np.diag(np.exp(log_s))
    for a in range(d):
        for b in range(a + 1, d):
            mat[a, b] += rng.uniform(-scale, scale)
    if d == 2:
        th = rng.uniform(-scale, scale)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    else:
        rot = np.eye(3)
        for axis in range(3):
            th = rng.uniform(-scale, scale)
            c, s = np.cos(th), np.sin(th)
            r = np.eye(3)
            i, j = [(1, 2), (0, 2), (0, 1)][axis]
            r[i, i] = c
            r[j, j] = c
            r[i, j] = -s
            r[j, i] = s
            rot = rot @ r
    mat = rot @ mat
    trans = rng.uniform(-scale, scale, size=d) * (min(shape.dims) / 2.0)
    return mat, trans


def _affine_map(mat: np.ndarray, trans: np.ndarray, shape: GridShape) -> DeformationMap:
    coords = identity_coords(shape)
    center = (np.array(shape.dims, dtype=np.float64) - 1.0) / 2.0
    rel = coords - center
    disp = np.einsum("ab,...b->...a", mat - np.eye(shape.ndim), rel) + trans
    return DeformationMap(VectorField(shape, disp))


def _affine_inverse_map(mat, trans, shape: GridShape) -> DeformationMap:
    inv = np.linalg.inv(mat)
    coords = identity_coords(shape)
    center = (np.array(shape.dims, dtype=np.float64) - 1.0) / 2.0
    disp = np.einsum("ab,...b->...a", inv, coords - center - trans) + center - coords
    return DeformationMap(VectorField(shape, disp))


def _random_velocity(rng, shape: GridShape, velocity_scale: float, smoothness: float):
    if velocity_scale == 0:
        return VectorField.zeros(shape)
    white = rng.normal(size=shape.dims + (shape.ndim,))
    smooth = np.empty_like(white)
    for k in range(shape.ndim):
        smooth[..., k] = gaussian_filter(white[..., k], sigma=smoothness, mode="reflect")
    field = VectorField(shape, smooth)
    peak = field.max_norm()
    if peak == 0.0:
        return VectorField.zeros(shape)
    return VectorField(shape, smooth * (velocity_scale / peak))


def generate(config: SynthConfig, squaring_steps: int = 6) -> SynthResult:
    """Generate a cohort; every member map is fold-free by rejection.

    A member is redrawn (fresh affine and velocity) while either direction
    of its ground-truth map contains interior folds; more than 100 redraws
    raises ConfigInfeasibleError.
    """
    shape = GridShape(config.dims)
    template, template_labels = make_template(config.dims, config.structures)
    root = np.random.SeedSequence(config.seed)
    children = root.spawn(config.cohort_size)
    images, labels, fwds, invs = [], [], [], []
    for i in range(config.cohort_size):
        rng = np.random.default_rng(children[i])
        accepted = None
        for _ in range(MAX_REJECTIONS):
            mat, trans = _random_affine(rng, shape, config.affine_scale)
            v = _random_velocity(rng, shape, config.velocity_scale, config.smoothness)
            flow_fwd = integrate(v, squaring_steps)
            flow_inv = integrate_inverse(v, squaring_steps)
            gt_inv = compose(_affine_map(mat, trans, shape), flow_fwd)  # member map M
            gt_fwd = compose(flow_inv, _affine_inverse_map(mat, trans, shape))  # M^-1
            if count_folds(gt_inv) == 0 and count_folds(gt_fwd) == 0:
                accepted = (gt_fwd, gt_inv)
                break
        if accepted is None:
            raise ConfigInfeasibleError(
                f"member {i}: no fold-free map within {MAX_REJECTIONS} draws; "
                "reduce velocity_scale/affine_scale or raise smoothness"
            )
        gt_fwd, gt_inv = accepted
        raw = warp(template, gt_inv)
        if config.noise_sigma > 0:
            noisy = raw.values + rng.normal(0.0, config.noise_sigma, size=shape.dims)
            raw = ScalarField(shape, np.clip(noisy, 0.0, 1.0))
        images.append(normalize_intensity(raw))
        labels.append(warp_labels(template_labels, gt_inv))
        fwds.append(gt_fwd)
        invs.append(gt_inv)
    return SynthResult(
        images, labels, normalize_intensity(template), template_labels, fwds, invs
    )
