"""Objective terms: similarity, bending regularizer, pairwise alignment."""

import numpy as np
import pytest

from atlasflow import (
    DeformationMap,
    DegenerateSimilarityError,
    GridShape,
    LossWeights,
    ScalarField,
    VectorField,
    bending_energy,
    identity_coords,
    integrate,
    integrate_inverse,
    mse,
    ncc_loss,
    pair_atlas_loss,
    pair_image_loss,
    total_pair_objective,
    velocity_bending,
    warp,
)
from conftest import affine_map, smooth_velocity, translation_map


def _bump_image(shape: GridShape, center, width: float = 3.0) -> ScalarField:
    """Gaussian bump; effectively zero near the borders."""
    coords = identity_coords(shape)
    d2 = sum((coords[..., a] - center[a]) ** 2 for a in range(shape.ndim))
    return ScalarField(shape, np.exp(-d2 / (2.0 * width**2)))


# --------------------------------------------------------------- LossWeights

def test_weights_default_to_pure_similarity():
    w = LossWeights()
    assert (w.sim_weight, w.lam, w.gamma1, w.gamma2) == (1.0, 0.0, 0.0, 0.0)


def test_weights_reject_negative_or_non_finite():
    with pytest.raises(ValueError):
        LossWeights(lam=-0.1)
    with pytest.raises(ValueError):
        LossWeights(gamma2=np.inf)


# ----------------------------------------------------------------------- mse

def test_mse_zero_on_equal_fields():
    f = ScalarField.from_array(np.random.default_rng(0).random((5, 5)))
    assert mse(f, f) == 0.0


def test_mse_constant_offset():
    a = ScalarField.from_array(np.random.default_rng(1).random((6, 6)))
    b = ScalarField.from_array(a.values + 0.5)
    assert mse(a, b) == pytest.approx(0.25, abs=1e-14)


def test_mse_direct_formula():
    # values {0,1} vs {1,3}: mean of (1, 4) = 2.5
    a = ScalarField.from_array(np.array([[0.0, 1.0], [0.0, 1.0]]))
    b = ScalarField.from_array(np.array([[1.0, 3.0], [1.0, 3.0]]))
    assert mse(a, b) == pytest.approx(2.5, abs=1e-14)


def test_mse_symmetric_and_shape_checked():
    rng = np.random.default_rng(2)
    a = ScalarField.from_array(rng.random((4, 6)))
    b = ScalarField.from_array(rng.random((4, 6)))
    assert mse(a, b) == mse(b, a)
    with pytest.raises(ValueError):
        mse(a, ScalarField.from_array(rng.random((6, 4))))


# ----------------------------------------------------------------------- ncc

def test_ncc_zero_on_identical_non_constant():
    a = ScalarField.from_array(np.random.default_rng(3).random((6, 6)))
    assert ncc_loss(a, a) == pytest.approx(0.0, abs=1e-12)


def test_ncc_two_on_negated():
    a = ScalarField.from_array(np.random.default_rng(4).random((6, 6)))
    b = ScalarField.from_array(-a.values)
    assert ncc_loss(a, b) == pytest.approx(2.0, abs=1e-12)


def test_ncc_affine_intensity_invariance():
    a = ScalarField.from_array(np.random.default_rng(5).random((6, 6)))
    b = ScalarField.from_array(3.0 * a.values + 7.0)
    assert ncc_loss(a, b) == pytest.approx(0.0, abs=1e-12)
    for alpha, beta in [(0.2, -1.0), (11.0, 0.3)]:
        c = ScalarField.from_array(alpha * a.values + beta)
        assert ncc_loss(a, c) == pytest.approx(0.0, abs=1e-10)


def test_ncc_rejects_near_constant_input():
    a = ScalarField.from_array(np.random.default_rng(6).random((5, 5)))
    flat = ScalarField.from_array(np.full((5, 5), 0.42))
    with pytest.raises(DegenerateSimilarityError):
        ncc_loss(a, flat)
    with pytest.raises(DegenerateSimilarityError):
        ncc_loss(flat, a)


# ------------------------------------------------------------ bending energy

def test_bending_identity_zero():
    assert bending_energy(DeformationMap.identity(GridShape((6, 6)))) == 0.0


def test_bending_affine_maps_vanish():
    shape = GridShape((9, 9))
    mat = np.array([[1.2, 0.3], [-0.1, 0.85]])
    assert bending_energy(affine_map(shape, mat, (2.0, -1.0))) <= 1e-10
    assert bending_energy(translation_map(shape, (3.0, 4.0))) <= 1e-10


def test_bending_quadratic_density():
    # u1 = x^2: H_1 = [[2,0],[0,0]], squared Frobenius norm 4 at every voxel
    shape = GridShape((10, 10))
    coords = identity_coords(shape)
    disp = np.zeros((10, 10, 2))
    disp[..., 0] = coords[..., 0] ** 2
    mapping = DeformationMap(VectorField(shape, disp))
    assert bending_energy(mapping) == pytest.approx(4.0, abs=1e-10)


def test_bending_invariant_under_added_affine():
    shape = GridShape((12, 12))
    v = smooth_velocity(shape, seed=7, max_norm=2.0, sigma=2.5)
    base = DeformationMap(v)
    mat = np.array([[1.05, -0.04], [0.08, 0.97]])
    aff = affine_map(shape, mat, (0.6, -0.3))
    shifted = DeformationMap(
        VectorField(shape, v.vectors + aff.displacement.vectors)
    )
    assert bending_energy(shifted) == pytest.approx(bending_energy(base), abs=1e-10)


def test_bending_rejects_small_extent():
    with pytest.raises(ValueError):
        bending_energy(DeformationMap.identity(GridShape((2, 6))))


def test_velocity_bending_matches_map_convention():
    # same Hessian penalty evaluated directly on a velocity field
    shape = GridShape((10, 10))
    coords = identity_coords(shape)
    vec = np.zeros((10, 10, 2))
    vec[..., 0] = coords[..., 0] ** 2
    assert velocity_bending(VectorField(shape, vec)) == pytest.approx(4.0, abs=1e-10)
    assert velocity_bending(VectorField.zeros(shape)) == 0.0


# ------------------------------------------------------------ pairwise terms

def test_pair_atlas_loss_zero_and_symmetric():
    shape = GridShape((12, 12))
    img = _bump_image(shape, (6.0, 6.0))
    ident = DeformationMap.identity(shape)
    assert pair_atlas_loss(img, img, ident, ident) == 0.0
    other = _bump_image(shape, (5.0, 7.0))
    fwd = translation_map(shape, (0.7, -0.2))
    assert pair_atlas_loss(img, other, fwd, ident) == pytest.approx(
        pair_atlas_loss(other, img, ident, fwd), abs=1e-15
    )


def test_pair_atlas_loss_constructed_alignment():
    # image j is image i shifted by (2,0); matching forward maps align them
    shape = GridShape((16, 16))
    bump = _bump_image(shape, (8.0, 8.0), width=2.0).values
    bump[bump < np.exp(-2.0)] = 0.0  # compact support (radius 4) keeps clamping inert
    img_i = ScalarField(shape, bump)
    img_j = ScalarField(shape, np.roll(bump, 2, axis=0))
    fwd_i = DeformationMap.identity(shape)
    fwd_j = translation_map(shape, (2.0, 0.0))  # samples j two rows ahead, back onto i
    assert pair_atlas_loss(img_i, img_j, fwd_i, fwd_j) < 1e-10


def test_pair_image_loss_zero_and_exchange_invariant():
    shape = GridShape((12, 12))
    img_i = _bump_image(shape, (6.0, 6.0))
    ident = DeformationMap.identity(shape)
    assert pair_image_loss(img_i, img_i, ident, ident, ident, ident) == 0.0

    img_j = _bump_image(shape, (7.0, 5.0))
    v_i = smooth_velocity(shape, seed=8, max_norm=1.0, sigma=3.0)
    v_j = smooth_velocity(shape, seed=9, max_norm=1.0, sigma=3.0)
    fwd_i, inv_i = integrate(v_i, 5), integrate_inverse(v_i, 5)
    fwd_j, inv_j = integrate(v_j, 5), integrate_inverse(v_j, 5)
    ij = pair_image_loss(img_i, img_j, fwd_i, fwd_j, inv_i, inv_j)
    ji = pair_image_loss(img_j, img_i, fwd_j, fwd_i, inv_j, inv_i)
    assert ij == pytest.approx(ji, abs=1e-15)
    assert ij >= 0.0


def test_pair_image_loss_ground_truth_registration():
    from atlasflow import SynthConfig, compose, generate

    result = generate(SynthConfig(dims=(48, 48), cohort_size=2, velocity_scale=2.0,
                                  noise_sigma=0.0, seed=3))
    (i0, i1), fwd, inv = result.images, result.fwd_maps, result.inv_maps
    into_1 = warp(i0, compose(fwd[0], inv[1]))
    into_0 = warp(i1, compose(fwd[1], inv[0]))
    interior = result.template.shape.interior()
    err = 0.5 * (
        np.mean((into_1.values - i1.values)[interior] ** 2)
        + np.mean((into_0.values - i0.values)[interior] ** 2)
    )
    assert err <= 1e-3


# -------------------------------------------------------- combined objective

def test_total_breakdown_sums_exactly():
    shape = GridShape((12, 12))
    atlas = _bump_image(shape, (6.0, 6.0))
    img_i = _bump_image(shape, (5.5, 6.5))
    img_j = _bump_image(shape, (6.5, 5.0))
    v_i = smooth_velocity(shape, seed=10, max_norm=1.0, sigma=3.0)
    v_j = smooth_velocity(shape, seed=11, max_norm=1.0, sigma=3.0)
    w = LossWeights(sim_weight=2.0, lam=0.3, gamma1=0.7, gamma2=1.1)
    out = total_pair_objective(atlas, img_i, img_j, v_i, v_j, w, squaring_steps=5)
    recomposed = (
        w.sim_weight * out["sim"]
        + w.lam * out["reg"]
        + w.gamma1 * out["pair_atlas"]
        + w.gamma2 * out["pair_image"]
    )
    assert out["total"] == pytest.approx(recomposed, abs=1e-12)


def test_total_zero_when_everything_matches():
    shape = GridShape((10, 10))
    img = _bump_image(shape, (5.0, 5.0))
    zeros = VectorField.zeros(shape)
    w = LossWeights(sim_weight=1.0, lam=0.5, gamma1=0.5, gamma2=0.5)
    out = total_pair_objective(img, img, img, zeros, zeros, w)
    assert out["total"] == 0.0


def test_total_reduces_to_independent_registrations():
    shape = GridShape((10, 10))
    atlas = _bump_image(shape, (5.0, 5.0))
    img_i = _bump_image(shape, (4.5, 5.5))
    img_j = _bump_image(shape, (5.5, 4.5))
    v_i = smooth_velocity(shape, seed=12, max_norm=0.8, sigma=3.0)
    v_j = smooth_velocity(shape, seed=13, max_norm=0.8, sigma=3.0)
    w = LossWeights(sim_weight=1.0, lam=0.25)
    out = total_pair_objective(atlas, img_i, img_j, v_i, v_j, w, squaring_steps=5)

    def single(img, v):
        inv = integrate_inverse(v, 5)
        return mse(warp(atlas, inv), img) + 0.25 * velocity_bending(v)

    assert out["total"] == pytest.approx(single(img_i, v_i) + single(img_j, v_j), abs=1e-12)


def test_total_monotone_in_weights():
    shape = GridShape((10, 10))
    atlas = _bump_image(shape, (5.0, 5.0))
    img_i = _bump_image(shape, (4.0, 5.0))
    img_j = _bump_image(shape, (6.0, 5.0))
    v_i = smooth_velocity(shape, seed=14, max_norm=1.0, sigma=2.5)
    v_j = smooth_velocity(shape, seed=15, max_norm=1.0, sigma=2.5)
    base = LossWeights(sim_weight=1.0, lam=0.1, gamma1=0.1, gamma2=0.1)
    t0 = total_pair_objective(atlas, img_i, img_j, v_i, v_j, base)["total"]
    for bump in ({"lam": 0.2}, {"gamma1": 0.2}, {"gamma2": 0.2}):
        kwargs = {"sim_weight": 1.0, "lam": 0.1, "gamma1": 0.1, "gamma2": 0.1}
        kwargs.update(bump)
        t1 = total_pair_objective(atlas, img_i, img_j, v_i, v_j, LossWeights(**kwargs))["total"]
        assert t1 >= t0
