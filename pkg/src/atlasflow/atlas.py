"""Atlas estimation: closed-form solutions and the learned-update path.

With the maps held fixed, the atlas that minimizes the summed data term has
a closed form.  When similarity lives in atlas space the minimizer is the
plain mean of the warped images; when it lives in each image space, a change
of variables turns the summed data term into the Jacobian-weighted
atlas-space form

    sum_i mean( (atlas - I_i o fwd_i)^2 * |D fwd_i| )

whose per-voxel weighted least-squares solution is the Jacobian-weighted
mean.  The learned path descends the same weighted form instead, which keeps
its gradient exact and per-voxel separable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateWeightsError, SequencingError
from .grid import DeformationMap, GridShape, ScalarField, VectorField, warp
from .losses import ncc_loss_gradient

# Weight sums at or below this are considered degenerate in atlas_forward.
WEIGHT_EPS = 1e-8

ATLAS_MODES = ("closed_form_forward", "closed_form_backward", "learned")


@dataclass
class Cohort:
    """A list of images on one shared grid, with optional segmentations."""

    images: list
    labels: list | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError("cohort must contain at least one image")
        dims = self.images[0].shape.dims
        for i, img in enumerate(self.images):
            if img.shape.dims != dims:
                raise ValueError(
                    f"cohort image {i} has grid {img.shape.dims}; member 0 has {dims}"
                )
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise ValueError("one label field per image required")
            for i, lab in enumerate(self.labels):
                if lab.shape.dims != dims:
                    raise ValueError(
                        f"label field {i} has grid {lab.shape.dims}; images have {dims}"
                    )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> GridShape:
        return self.images[0].shape


def init_atlas(cohort: Cohort) -> ScalarField:
    """Voxelwise mean of the raw cohort images."""
    stack = np.stack([img.values for img in cohort.images])
    return ScalarField(cohort.shape, stack.mean(axis=0))


def atlas_backward(warped: list) -> ScalarField:
    """Closed-form atlas for atlas-space similarity: plain mean of warped images."""
    if not warped:
        raise ValueError("need at least one warped image")
    stack = np.stack([w.values for w in warped])
    return ScalarField(warped[0].shape, stack.mean(axis=0))


def atlas_forward(warped: list, jac_dets: list) -> ScalarField:
    """Closed-form atlas for image-space similarity: Jacobian-weighted mean.

    Parameters
    ----------
    warped : list of ScalarField
        Images pulled into atlas space, I_i o fwd_i.
    jac_dets : list of ScalarField
        Determinants |D fwd_i| on the same grid.

    Raises
    ------
    DegenerateWeightsError
        If the weight sum at some voxel falls at or below 1e-8; the message
        names the first offending voxel.

    Determinants can dip below zero right at the clamped border (one-sided
    differences, not actual folds); those values carry zero weight so a
    single bad border voxel cannot poison the average.
    """
    if not warped or len(warped) != len(jac_dets):
        raise ValueError("need matching, non-empty warped/jac_dets lists")
    num = np.zeros(warped[0].values.shape)
    den = np.zeros_like(num)
    for w, j in zip(warped, jac_dets):
        if w.shape.dims != warped[0].shape.dims or j.shape.dims != w.shape.dims:
            raise ValueError("all fields must share one grid")
        weight = np.maximum(j.values, 0.0)
        num += w.values * weight
        den += weight
    bad = den <= WEIGHT_EPS
    if bad.any():
        voxel = tuple(int(c) for c in np.argwhere(bad)[0])
        raise DegenerateWeightsError(
            f"jacobian weight sum {den[voxel]:.3e} <= {WEIGHT_EPS:.0e} at voxel {voxel}"
        )
    return ScalarField(warped[0].shape, num / den)


def forward_data_term(atlas: ScalarField, warped: list, jac_dets: list) -> float:
    """Summed Jacobian-weighted data term with the maps frozen.

    atlas_forward minimizes this exactly, per voxel.
    """
    total = 0.0
    for w, j in zip(warped, jac_dets):
        total += float(np.mean((atlas.values - w.values) ** 2 * j.values))
    return total


def atlas_data_gradient(
    atlas: ScalarField,
    image: ScalarField,
    fwd_map: DeformationMap,
    jac_det: ScalarField | None = None,
    similarity: str = "mse",
) -> ScalarField:
    """One image's contribution to the atlas gradient of the data term.

    For MSE this is 2*(atlas - image o fwd)*|D fwd| in the mean convention:
    the exact gradient of forward_data_term.  For NCC the residual derivative
    is replaced by the NCC gradient of (atlas, image o fwd) — the analogous
    chain rule; the Jacobian factor still accounts for the change of
    variables.
    """
    from .grid import jacobian_determinant  # local import avoids cycle at module load

    pulled = warp(image, fwd_map)
    w = jac_det.values if jac_det is not None else jacobian_determinant(fwd_map).values
    if similarity == "mse":
        g = 2.0 * (atlas.values - pulled.values) * w
    elif similarity == "ncc":
        g = ncc_loss_gradient(atlas, pulled).values * w
    else:
        raise ValueError(f"unknown similarity {similarity!r}")
    return ScalarField(atlas.shape, g)


@dataclass
class AtlasState:
    """Current atlas estimate, per-image velocities, and update bookkeeping."""

    atlas: ScalarField
    velocities: list
    mode: str = "closed_form_forward"
    accumulated_gradient: ScalarField | None = None
    contributions: int = 0

    def __post_init__(self):
        if self.mode not in ATLAS_MODES:
            raise ValueError(f"unknown atlas mode {self.mode!r}; expected {ATLAS_MODES}")
        if not self.velocities:
            raise ValueError("need at least one velocity field")
        for v in self.velocities:
            if not isinstance(v, VectorField) or v.shape.dims != self.atlas.shape.dims:
                raise ValueError("velocities must be VectorFields on the atlas grid")
        if self.accumulated_gradient is None:
            self.accumulated_gradient = ScalarField(
                self.atlas.shape, np.zeros(self.atlas.shape.dims)
            )

    def reset_accumulator(self):
        self.accumulated_gradient = ScalarField(
            self.atlas.shape, np.zeros(self.atlas.shape.dims)
        )
        self.contributions = 0

    def accumulate(self, contribution: ScalarField):
        if contribution.shape.dims != self.atlas.shape.dims:
            raise ValueError("gradient contribution grid mismatch")
        self.accumulated_gradient = ScalarField(
            self.atlas.shape, self.accumulated_gradient.values + contribution.values
        )
        self.contributions += 1


def apply_learned_update(state: AtlasState, step: float) -> AtlasState:
    """Descend the accumulated atlas gradient and clamp intensities to [0, 1].

    Requires learned mode and one full epoch of contributions (one per
    image); the accumulator is reset afterwards.  Because the weighted data
    term is per-voxel separable and quadratic, the clamped update never
    increases it for small steps.
    """
    if state.mode != "learned":
        raise SequencingError(f"apply_learned_update requires learned mode, not {state.mode!r}")
    if state.contributions != len(state.velocities):
        raise SequencingError(
            f"epoch incomplete: {state.contributions} of {len(state.velocities)} "
            "gradient contributions accumulated"
        )
    if not np.isfinite(step) or step < 0:
        raise ValueError(f"step must be finite and >= 0, got {step}")
    new_values = np.clip(state.atlas.values - step * state.accumulated_gradient.values, 0.0, 1.0)
    state.atlas = ScalarField(state.atlas.shape, new_values)
    state.reset_accumulator()
    return state


def recenter_atlas(state: AtlasState, target_mean: float):
    """Shift the atlas mean to target_mean, then clamp to [0, 1].

    Used after NCC learned updates, since NCC is blind to intensity offset.
    """
    shifted = state.atlas.values + (target_mean - state.atlas.values.mean())
    state.atlas = ScalarField(state.atlas.shape, np.clip(shifted, 0.0, 1.0))
