"""Similarity measures, bending-energy regularizer, and pairwise losses.

Every field-valued norm in this package is a voxel mean, so losses are
resolution independent; gradients returned elsewhere are Riesz
representatives under the matching mean inner product.

The pairwise objective for one cohort pair (i, j) is

    sim_weight * [ sim(I_i, atlas o inv_i) + sim(I_j, atlas o inv_j) ]
    + lambda   * [ Reg(v_i) + Reg(v_j) ]
    + gamma1   * sim(I_i o fwd_i, I_j o fwd_j)                 (atlas space)
    + gamma2   * [ sim(I_i o fwd_i o inv_j, I_j) + symmetric ] (image space)

with fwd = exp(+v), inv = exp(-v), and Reg the interior-mean squared
Frobenius norm of the per-component Hessians.  Affine motions have zero
bending energy, so no affine pre-alignment is required.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSimilarityError
from .grid import (
    DeformationMap,
    ScalarField,
    VectorField,
    _second_difference,
    compose,
    hessian_components,
    warp,
)
from .svf import integrate, integrate_inverse

SIMILARITIES = ("mse", "ncc")

# Similarity inputs whose standard deviation falls at or below this are
# treated as constant and rejected for NCC.
DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Non-negative coefficients of the pairwise objective."""

    sim_weight: float = 1.0
    lam: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0

    def __post_init__(self):
        for name in ("sim_weight", "lam", "gamma1", "gamma2"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")


def _check_same_grid(a: ScalarField, b: ScalarField):
    if a.shape.dims != b.shape.dims:
        raise ValueError(f"field grids differ: {a.shape.dims} vs {b.shape.dims}")


def mse(a: ScalarField, b: ScalarField) -> float:
    """Mean squared intensity difference."""
    _check_same_grid(a, b)
    return float(np.mean((a.values - b.values) ** 2))


def _centered(values: np.ndarray):
    flat = values.ravel()
    centered = flat - flat.mean()
    std = np.sqrt(np.mean(centered**2))
    return centered, std


def ncc_loss(a: ScalarField, b: ScalarField) -> float:
    """One minus the Pearson correlation of the two intensity vectors.

    Ranges over [0, 2]; 0 means perfectly correlated.  Raises
    DegenerateSimilarityError when either input is (near-)constant.
    """
    _check_same_grid(a, b)
    ca, sa = _centered(a.values)
    cb, sb = _centered(b.values)
    if sa <= DEGENERATE_STD or sb <= DEGENERATE_STD:
        raise DegenerateSimilarityError(
            f"ncc undefined: input std {min(sa, sb):.3e} <= {DEGENERATE_STD:.0e}"
        )
    r = float(np.mean(ca * cb) / (sa * sb))
    return 1.0 - r


def ncc_loss_gradient(a: ScalarField, b: ScalarField) -> ScalarField:
    """Gradient of ncc_loss with respect to its first argument.

    Returned in the voxel-mean inner-product convention used throughout.
    """
    _check_same_grid(a, b)
    ca, sa = _centered(a.values)
    cb, sb = _centered(b.values)
    if sa <= DEGENERATE_STD or sb <= DEGENERATE_STD:
        raise DegenerateSimilarityError(
            f"ncc undefined: input std {min(sa, sb):.3e} <= {DEGENERATE_STD:.0e}"
        )
    r = float(np.mean(ca * cb) / (sa * sb))
    g = -(cb / (sa * sb) - r * ca / sa**2)
    return ScalarField(a.shape, g.reshape(a.values.shape))


def similarity_loss(a: ScalarField, b: ScalarField, similarity: str = "mse") -> float:
    if similarity == "mse":
        return mse(a, b)
    if similarity == "ncc":
        return ncc_loss(a, b)
    raise ValueError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")


def similarity_loss_gradient(a: ScalarField, b: ScalarField, similarity: str = "mse") -> ScalarField:
    """d sim(a, b) / d a in the mean convention (2(a-b) for MSE)."""
    if similarity == "mse":
        _check_same_grid(a, b)
        return ScalarField(a.shape, 2.0 * (a.values - b.values))
    if similarity == "ncc":
        return ncc_loss_gradient(a, b)
    raise ValueError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")


def bending_energy(mapping: DeformationMap) -> float:
    """Interior mean of the summed squared Hessian entries of the map.

    The identity part differentiates away exactly, so this equals the
    bending of the displacement alone, and any affine map scores 0.
    """
    H = hessian_components(mapping)
    density = (H**2).sum(axis=(-3, -2, -1))
    return float(density[mapping.shape.interior()].mean())


def velocity_bending(v: VectorField) -> float:
    """Bending energy of the velocity field (regularizer used for descent)."""
    return bending_energy(DeformationMap(v))


def _gradient_adjoint(w: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Transpose of the np.gradient operator along one axis."""
    out = np.zeros_like(w)
    wv = np.moveaxis(w, axis, 0)
    ov = np.moveaxis(out, axis, 0)
    n = wv.shape[0]
    # interior rows scatter +-1/(2h) to their neighbours
    ov[0 : n - 2] -= wv[1 : n - 1] / (2.0 * h)
    ov[2:n] += wv[1 : n - 1] / (2.0 * h)
    # one-sided boundary rows
    ov[0] -= wv[0] / h
    ov[1] += wv[0] / h
    ov[n - 2] -= wv[n - 1] / h
    ov[n - 1] += wv[n - 1] / h
    return out


def _second_difference_adjoint(w: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Transpose of the shifted [1, -2, 1] stencil in grid._second_difference."""
    wv = np.moveaxis(w, axis, 0)
    out = np.zeros_like(wv)
    # interior rows scatter [1, -2, 1] onto their own neighbourhood
    out[:-2] += wv[1:-1]
    out[1:-1] -= 2.0 * wv[1:-1]
    out[2:] += wv[1:-1]
    # boundary rows reuse the stencil anchored one voxel inward
    out[0] += wv[0]
    out[1] -= 2.0 * wv[0]
    out[2] += wv[0]
    out[-3] += wv[-1]
    out[-2] -= 2.0 * wv[-1]
    out[-1] += wv[-1]
    return np.moveaxis(out, 0, axis) / (h * h)


def velocity_bending_gradient(v: VectorField) -> VectorField:
    """Exact discrete gradient of velocity_bending, mean convention.

    Built from the transposed difference operators, so it matches central
    finite differences of the energy to machine precision.
    """
    shape = v.shape
    if any(n < 3 for n in shape.dims):
        raise ValueError(f"bending gradient needs every extent >= 3, got {shape.dims}")
    d = shape.ndim
    spacing = shape.spacing
    interior = np.zeros(shape.dims)
    interior[shape.interior()] = 1.0
    n_interior = interior.sum()
    scale = 2.0 * shape.num_voxels / n_interior
    out = np.zeros_like(v.vectors)
    for k in range(d):
        firsts = np.gradient(v.vectors[..., k], *spacing)
        for a in range(d):
            masked = interior * _second_difference(v.vectors[..., k], a, spacing[a])
            out[..., k] += scale * _second_difference_adjoint(masked, a, spacing[a])
            seconds = np.gradient(firsts[a], *spacing)
            for b in range(d):
                if b == a:
                    continue
                masked = interior * seconds[b]
                out[..., k] += scale * _gradient_adjoint(
                    _gradient_adjoint(masked, b, spacing[b]), a, spacing[a]
                )
    return VectorField(shape, out)


def pair_atlas_loss(
    image_i: ScalarField,
    image_j: ScalarField,
    fwd_i: DeformationMap,
    fwd_j: DeformationMap,
    similarity: str = "mse",
) -> float:
    """Alignment of the two images after both are pulled into atlas space."""
    return similarity_loss(warp(image_i, fwd_i), warp(image_j, fwd_j), similarity)


def pair_image_loss(
    image_i: ScalarField,
    image_j: ScalarField,
    fwd_i: DeformationMap,
    fwd_j: DeformationMap,
    inv_i: DeformationMap,
    inv_j: DeformationMap,
    similarity: str = "mse",
) -> float:
    """Symmetrized alignment measured in each native image space.

    Image i is carried through atlas space into image j's space by the
    composite map fwd_i o inv_j (single resampling through the composed
    map), and vice versa.
    """
    into_j = warp(image_i, compose(fwd_i, inv_j))
    into_i = warp(image_j, compose(fwd_j, inv_i))
    return similarity_loss(into_j, image_j, similarity) + similarity_loss(
        into_i, image_i, similarity
    )


def total_pair_objective(
    atlas: ScalarField,
    image_i: ScalarField,
    image_j: ScalarField,
    v_i: VectorField,
    v_j: VectorField,
    weights: LossWeights,
    similarity: str = "mse",
    squaring_steps: int = 6,
) -> dict:
    """Full objective for one pair; returns the total and the raw terms.

    The total equals
    ``sim_weight*sim + lam*reg + gamma1*pair_atlas + gamma2*pair_image``
    exactly.  ``reg`` is the optimized velocity bending; the bending of the
    inverse maps is reported alongside as ``reg_map`` for reference.
    """
    fwd_i, inv_i = integrate(v_i, squaring_steps), integrate_inverse(v_i, squaring_steps)
    fwd_j, inv_j = integrate(v_j, squaring_steps), integrate_inverse(v_j, squaring_steps)
    sim = similarity_loss(warp(atlas, inv_i), image_i, similarity) + similarity_loss(
        warp(atlas, inv_j), image_j, similarity
    )
    reg = velocity_bending(v_i) + velocity_bending(v_j)
    pa = pair_atlas_loss(image_i, image_j, fwd_i, fwd_j, similarity)
    pi = pair_image_loss(image_i, image_j, fwd_i, fwd_j, inv_i, inv_j, similarity)
    total = weights.sim_weight * sim + weights.lam * reg + weights.gamma1 * pa + weights.gamma2 * pi
    return {
        "total": total,
        "sim": sim,
        "reg": reg,
        "pair_atlas": pa,
        "pair_image": pi,
        "reg_map": bending_energy(inv_i) + bending_energy(inv_j),
    }


def cohort_objective(
    atlas: ScalarField,
    images: list,
    velocities: list,
    weights: LossWeights,
    similarity: str = "mse",
    squaring_steps: int = 6,
    pairs: list | None = None,
) -> dict:
    """Sum of the pair objectives over the given pairs (default: all i < j).

    Per-image maps are integrated once and shared across pairs.  Each image's
    data and regularizer terms are counted once per pair containing it, so
    with all pairs they carry the (N-1) multiplicity of the summed objective.
    """
    n = len(images)
    if len(velocities) != n:
        raise ValueError("one velocity per image required")
    if n < 2:
        raise ValueError("need at least two images")
    if pairs is None:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    fwd = [integrate(v, squaring_steps) for v in velocities]
    inv = [integrate_inverse(v, squaring_steps) for v in velocities]
    sim_term = [
        similarity_loss(warp(atlas, inv[i]), images[i], similarity) for i in range(n)
    ]
    reg_term = [velocity_bending(v) for v in velocities]
    out = {"total": 0.0, "sim": 0.0, "reg": 0.0, "pair_atlas": 0.0, "pair_image": 0.0}
    for i, j in pairs:
        sim = sim_term[i] + sim_term[j]
        reg = reg_term[i] + reg_term[j]
        pa = pair_atlas_loss(images[i], images[j], fwd[i], fwd[j], similarity)
        pi = pair_image_loss(images[i], images[j], fwd[i], fwd[j], inv[i], inv[j], similarity)
        out["sim"] += sim
        out["reg"] += reg
        out["pair_atlas"] += pa
        out["pair_image"] += pi
        out["total"] += (
            weights.sim_weight * sim
            + weights.lam * reg
            + weights.gamma1 * pa
            + weights.gamma2 * pi
        )
    return out
