"""Regular-grid fields and the sampling/derivative kernels built on them.

Conventions used throughout the package:

* All coordinates are in voxel units; grid axes follow array axes, so a
  point is ``(c0, c1[, c2])`` indexing ``values[c0, c1, c2]``.  Physical
  spacing enters only inside derivative operators.
* Sampling is multilinear with clamp-to-border behaviour (out-of-domain
  coordinates are clamped to the boundary); label images use nearest
  neighbour instead.
* Deformation maps are stored as identity-plus-displacement, i.e. the map
  evaluates to ``x + u(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates


@dataclass(frozen=True)
class GridShape:
    """Extents and voxel spacing of a 2D or 3D regular grid."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...] = ()

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {len(dims)} dims")
        if any(n < 2 for n in dims):
            raise ValueError(f"every extent must be >= 2, got {dims}")
        spacing = tuple(float(s) for s in self.spacing) or (1.0,) * len(dims)
        if len(spacing) != len(dims):
            raise ValueError("spacing length must match dims")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing entries must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def interior(self) -> tuple[slice, ...]:
        """Slices selecting voxels at least one step from every boundary."""
        return tuple(slice(1, n - 1) for n in self.dims)


def _as_float_array(values, dims) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape[: len(dims)] != tuple(dims):
        raise ValueError(f"array shape {arr.shape} does not match grid dims {dims}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    return arr


@dataclass
class ScalarField:
    """One real value per voxel."""

    shape: GridShape
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_float_array(self.values, self.shape.dims)
        if self.values.ndim != self.shape.ndim:
            raise ValueError("scalar field must have exactly one value per voxel")

    @classmethod
    def from_array(cls, values, spacing=()) -> "ScalarField":
        values = np.asarray(values, dtype=np.float64)
        return cls(GridShape(values.shape, spacing), values)


@dataclass
class VectorField:
    """One d-vector per voxel, stored with components on the last axis."""

    shape: GridShape
    vectors: np.ndarray

    def __post_init__(self):
        d = self.shape.ndim
        arr = _as_float_array(self.vectors, self.shape.dims)
        if arr.ndim != d + 1 or arr.shape[-1] != d:
            raise ValueError(
                f"vector field must have shape dims + ({d},), got {arr.shape}"
            )
        self.vectors = arr

    @classmethod
    def zeros(cls, shape: GridShape) -> "VectorField":
        return cls(shape, np.zeros(shape.dims + (shape.ndim,)))

    @classmethod
    def from_array(cls, vectors, spacing=()) -> "VectorField":
        vectors = np.asarray(vectors, dtype=np.float64)
        return cls(GridShape(vectors.shape[:-1], spacing), vectors)

    def max_norm(self) -> float:
        """Largest per-voxel Euclidean norm."""
        return float(np.sqrt((self.vectors**2).sum(axis=-1)).max())


@dataclass
class LabelField:
    """Integer structure labels, 0 = background, 1..num_structures = foreground."""

    shape: GridShape
    labels: np.ndarray
    num_structures: int = field(default=-1)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("labels must be integers")
        arr = arr.astype(np.int64)
        if arr.shape != self.shape.dims:
            raise ValueError(f"label shape {arr.shape} does not match {self.shape.dims}")
        if arr.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.num_structures < 0:
            self.num_structures = int(arr.max())
        if arr.max() > self.num_structures:
            raise ValueError(
                f"label {arr.max()} exceeds num_structures {self.num_structures}"
            )
        self.labels = arr


@dataclass
class DeformationMap:
    """Map x -> x + u(x); the displacement u is a VectorField on the grid."""

    displacement: VectorField

    @property
    def shape(self) -> GridShape:
        return self.displacement.shape

    @classmethod
    def identity(cls, shape: GridShape) -> "DeformationMap":
        return cls(VectorField.zeros(shape))

    def target_coords(self) -> np.ndarray:
        """Per-voxel target positions x + u(x), shape dims + (d,)."""
        return identity_coords(self.shape) + self.displacement.vectors


_IDENTITY_CACHE: dict[tuple[int, ...], np.ndarray] = {}


def identity_coords(shape: GridShape) -> np.ndarray:
    """Voxel-center coordinates, shape dims + (d,).  Cached per extent tuple."""
    key = shape.dims
    if key not in _IDENTITY_CACHE:
        axes = [np.arange(n, dtype=np.float64) for n in key]
        _IDENTITY_CACHE[key] = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return _IDENTITY_CACHE[key]


def _sample(values: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    # coords shape dims + (d,) -> map_coordinates wants (d, ...)
    stacked = np.moveaxis(coords, -1, 0)
    return map_coordinates(values, stacked, order=order, mode="nearest")


def interpolate(field: ScalarField, point) -> float:
    """Multilinear sample of a scalar field at one voxel-unit point.

    Out-of-domain coordinates are clamped to the boundary.
    """
    pt = np.asarray(point, dtype=np.float64)
    if pt.shape != (field.shape.ndim,):
        raise ValueError(f"point must have {field.shape.ndim} coordinates")
    if not np.all(np.isfinite(pt)):
        raise ValueError("point coordinates must be finite")
    out = map_coordinates(field.values, pt[:, None], order=1, mode="nearest")
    return float(out[0])


def interpolate_vec(field: VectorField, point) -> np.ndarray:
    """Componentwise multilinear sample of a vector field at one point."""
    pt = np.asarray(point, dtype=np.float64)
    if pt.shape != (field.shape.ndim,):
        raise ValueError(f"point must have {field.shape.ndim} coordinates")
    if not np.all(np.isfinite(pt)):
        raise ValueError("point coordinates must be finite")
    return np.array(
        [
            map_coordinates(field.vectors[..., k], pt[:, None], order=1, mode="nearest")[0]
            for k in range(field.shape.ndim)
        ]
    )


def _warp_values(values: np.ndarray, mapping: DeformationMap, order: int) -> np.ndarray:
    return _sample(values, mapping.target_coords(), order)


def warp(image: ScalarField, mapping: DeformationMap) -> ScalarField:
    """Resample ``image`` through ``mapping``: out(x) = image(x + u(x)).

    A zero displacement reproduces the input bit for bit.
    """
    if image.shape.dims != mapping.shape.dims:
        raise ValueError("image and map must live on the same grid")
    return ScalarField(image.shape, _warp_values(image.values, mapping, order=1))


def warp_vectors(vf: VectorField, mapping: DeformationMap) -> VectorField:
    """Componentwise resampling of a vector field through a map."""
    if vf.shape.dims != mapping.shape.dims:
        raise ValueError("field and map must live on the same grid")
    coords = mapping.target_coords()
    out = np.empty_like(vf.vectors)
    for k in range(vf.shape.ndim):
        out[..., k] = _sample(vf.vectors[..., k], coords, order=1)
    return VectorField(vf.shape, out)


def warp_labels(labels: LabelField, mapping: DeformationMap) -> LabelField:
    """Nearest-neighbour resampling of a label image through a map."""
    if labels.shape.dims != mapping.shape.dims:
        raise ValueError("labels and map must live on the same grid")
    coords = np.moveaxis(mapping.target_coords(), -1, 0)
    out = map_coordinates(labels.labels, coords, order=0, mode="nearest")
    return LabelField(labels.shape, out, labels.num_structures)


def gradient(field: ScalarField) -> VectorField:
    """Spatial gradient: central differences inside, one-sided at the border.

    Components are divided by the grid spacing.
    """
    parts = np.gradient(field.values, *field.shape.spacing)
    return VectorField(field.shape, np.stack(parts, axis=-1))


def jacobian_determinant(mapping: DeformationMap) -> ScalarField:
    """Determinant of the finite-difference Jacobian of the map itself.

    Computed in index space; the identity map yields exactly 1 everywhere
    (anisotropic spacing cancels out of the determinant).
    """
    coords = mapping.target_coords()
    d = mapping.shape.ndim
    # J[..., k, a] = d coords_k / d x_a
    J = np.empty(mapping.shape.dims + (d, d))
    for k in range(d):
        parts = np.gradient(coords[..., k])
        for a in range(d):
            J[..., k, a] = parts[a]
    if d == 2:
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    else:
        det = (
            J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
            - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
            + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
        )
    return ScalarField(mapping.shape, det)


def _second_difference(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """[1, -2, 1] second difference along one axis, stencil shifted at borders.

    Exact for quadratic profiles at every voxel, border rows included.
    """
    g = np.moveaxis(values, axis, 0)
    out = np.empty_like(g)
    out[1:-1] = g[:-2] - 2.0 * g[1:-1] + g[2:]
    out[0] = g[0] - 2.0 * g[1] + g[2]
    out[-1] = g[-3] - 2.0 * g[-2] + g[-1]
    return np.moveaxis(out, 0, axis) / (h * h)


def hessian_components(mapping: DeformationMap) -> np.ndarray:
    """Per-voxel Hessians of every map component, shape dims + (d, d, d).

    ``out[..., k, a, b]`` holds the second difference of component k along
    axes a and b.  Pure second derivatives use a dedicated [1, -2, 1]
    stencil (exact for quadratics on the whole interior); mixed partials
    are repeated first differences and symmetric by construction because
    the two single-axis operators commute.  Requires every extent >= 3.
    """
    shape = mapping.shape
    if any(n < 3 for n in shape.dims):
        raise ValueError(f"hessian needs every extent >= 3, got {shape.dims}")
    coords = mapping.target_coords()
    d = shape.ndim
    H = np.empty(shape.dims + (d, d, d))
    for k in range(d):
        firsts = np.gradient(coords[..., k], *shape.spacing)
        for a in range(d):
            H[..., k, a, a] = _second_difference(coords[..., k], a, shape.spacing[a])
            seconds = np.gradient(firsts[a], *shape.spacing)
            for b in range(d):
                if b != a:
                    H[..., k, a, b] = seconds[b]
    return H


def compose(outer: DeformationMap, inner: DeformationMap) -> DeformationMap:
    """Map composition outer(inner(x)) on a shared grid.

    Displacements add after resampling the outer displacement at the inner
    map's targets: u(x) = u_in(x) + u_out(x + u_in(x)).
    """
    if outer.shape.dims != inner.shape.dims:
        raise ValueError("maps must live on the same grid")
    coords = inner.target_coords()
    u = inner.displacement.vectors.copy()
    for k in range(inner.shape.ndim):
        u[..., k] += _sample(outer.displacement.vectors[..., k], coords, order=1)
    return DeformationMap(VectorField(inner.shape, u))
