"""Shared builders for the test suite."""

import numpy as np
from scipy.ndimage import gaussian_filter

from atlasflow import DeformationMap, GridShape, VectorField, identity_coords


def smooth_velocity(shape: GridShape, seed, max_norm: float = 4.0, sigma: float = 4.0):
    """Gaussian-smoothed white noise rescaled to a target peak norm.

    This is the "smooth velocity family" used throughout: sigma >= 4 voxels,
    max |v| <= 4 voxels keeps unit-time flows diffeomorphic.
    """
    rng = np.random.default_rng(seed)
    white = rng.normal(size=shape.dims + (shape.ndim,))
    smooth = np.empty_like(white)
    for k in range(shape.ndim):
        smooth[..., k] = gaussian_filter(white[..., k], sigma=sigma, mode="reflect")
    field = VectorField(shape, smooth)
    peak = field.max_norm()
    return VectorField(shape, smooth * (max_norm / peak))


def translation_map(shape: GridShape, offset) -> DeformationMap:
    disp = np.broadcast_to(np.asarray(offset, dtype=float), shape.dims + (shape.ndim,))
    return DeformationMap(VectorField(shape, np.array(disp)))


def affine_map(shape: GridShape, mat, trans) -> DeformationMap:
    """Map x -> mat @ x + trans built directly from its displacement."""
    coords = identity_coords(shape)
    mat = np.asarray(mat, dtype=float)
    disp = np.einsum("ab,...b->...a", mat - np.eye(shape.ndim), coords)
    disp = disp + np.asarray(trans, dtype=float)
    return DeformationMap(VectorField(shape, disp))
