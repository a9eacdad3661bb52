"""Velocity-field gradients and the alternating atlas-build driver.

The per-image gradients of the pairwise objective follow from the calculus
of variations.  Writing J_t = exp((1-t)v) pullbacks of the image, Jc_t the
atlas pulled to time t, Jhat_t / Jtilde_t the plain / Jacobian-weighted
means of all forward-warped images pulled to time t, and J^{j,i}_t image j
carried into image i's trajectory, the gradient of the summed objective
with respect to v_i collects four blocks:

  (N-1) [ lambda * grad Reg(v_i)
          - 2 sim_weight * S int |D exp((1-t)v)| (Jc_t - J_t) grad Jc_t dt ]
  - 2 N gamma1   * S int |D exp(-t v)| (Jhat_t   - J_t) grad J_t     dt
  - 2 gamma2     * S int W_t |D exp(-t v)| (Jtilde_t - J_t) grad J_t dt
  - 2 gamma2 sum_{j != i} S int |D exp((1-t)v)| (J^{j,i}_t - J_t) grad J^{j,i}_t dt

with W_t the pulled-back sum of forward Jacobian determinants.  Time
integrals use the midpoint rule with T samples; every field norm is a voxel
mean, so gradients are Riesz representatives under the mean inner product
(fd_gradient applies the matching scale).

For NCC the squared-difference residuals are replaced by pullbacks of the
NCC derivative fields through the same four-block skeleton.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .atlas import (
    ATLAS_MODES,
    WEIGHT_EPS,
    AtlasState,
    Cohort,
    apply_learned_update,
    atlas_backward,
    atlas_data_gradient,
    init_atlas,
    recenter_atlas,
)
from .errors import ConfigError, NumericError
from .evaluation import count_folds
from .grid import (
    DeformationMap,
    ScalarField,
    VectorField,
    compose,
    gradient,
    jacobian_determinant,
    warp,
)
from .losses import (
    SIMILARITIES,
    LossWeights,
    similarity_loss,
    similarity_loss_gradient,
    velocity_bending,
    velocity_bending_gradient,
)
from .svf import integrate, integrate_inverse

METHODS = ("steepest_descent", "adaptive_moments")
PAIR_SAMPLINGS = ("random_pairs_per_epoch", "all_pairs")

# alias kept so the regularizer's exact discrete gradient is reachable from
# the module that consumes it
regularizer_gradient = velocity_bending_gradient


@dataclass
class OptimConfig:
    """Knobs of the atlas-building optimization."""

    step_size: float = 0.1
    method: str = "adaptive_moments"
    epochs: int = 100
    atlas_refresh_period: int = 10
    quadrature_samples: int = 8
    squaring_steps: int = 6
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    similarity: str = "mse"
    pair_sampling: str = "random_pairs_per_epoch"
    atlas_mode: str = "closed_form_forward"
    atlas_step: float = 0.25
    threads: int = 0
    reset_momentum_on_refresh: bool = False

    def __post_init__(self):
        if not np.isfinite(self.step_size) or self.step_size <= 0:
            raise ConfigError(f"step_size must be finite and > 0, got {self.step_size}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("epochs", "atlas_refresh_period", "quadrature_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if int(self.squaring_steps) < 1:
            raise ConfigError("squaring_steps must be >= 1")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.pair_sampling not in PAIR_SAMPLINGS:
            raise ConfigError(f"unknown pair_sampling {self.pair_sampling!r}")
        if self.atlas_mode not in ATLAS_MODES:
            raise ConfigError(f"unknown atlas_mode {self.atlas_mode!r}")
        if self.similarity == "ncc" and self.atlas_mode.startswith("closed_form"):
            raise ConfigError(
                "ncc similarity does not lead to a closed-form atlas; use atlas_mode=learned"
            )
        if not np.isfinite(self.atlas_step) or self.atlas_step < 0:
            raise ConfigError(f"atlas_step must be finite and >= 0, got {self.atlas_step}")
        if int(self.threads) < 0:
            raise ConfigError("threads must be >= 0 (0 = auto)")


@dataclass
class GradientReport:
    """Per-image gradients plus the loss breakdown they were computed from."""

    gradients: list
    losses: dict
    grad_max_norm: float
    fwd_maps: list
    inv_maps: list
    warped: list
    jac_dets: list


def _time_samples(T: int) -> list:
    return [(m - 0.5) / T for m in range(1, T + 1)]


def fd_gradient(energy, v: VectorField, eps: float = 1e-5) -> VectorField:
    """Central-difference gradient of a scalar energy, mean convention.

    Perturbs every velocity component in turn; the voxel count rescales the
    plain partial derivatives into the mean inner product, so the quadratic
    toy energy 0.5 * mean(|v|^2) yields exactly v.
    """
    if not np.isfinite(eps) or eps <= 0:
        raise ValueError(f"eps must be finite and > 0, got {eps}")
    base = v.vectors.copy()
    out = np.zeros_like(base)
    nvox = v.shape.num_voxels
    work = base.copy()
    for idx in np.ndindex(base.shape):
        work[idx] = base[idx] + eps
        e_plus = float(energy(VectorField(v.shape, work)))
        work[idx] = base[idx] - eps
        e_minus = float(energy(VectorField(v.shape, work)))
        work[idx] = base[idx]
        out[idx] = (e_plus - e_minus) / (2.0 * eps) * nvox
    return VectorField(v.shape, out)


def _scaled(v: VectorField, factor: float) -> VectorField:
    return VectorField(v.shape, factor * v.vectors)


def _vanilla_core(
    atlas: ScalarField,
    image: ScalarField,
    v: VectorField,
    weights: LossWeights,
    T: int,
    K: int,
    similarity: str,
    inv_map: DeformationMap | None = None,
    want_cache: bool = False,
):
    """Single-image data + regularizer gradient; optionally caches flows."""
    g = np.zeros_like(v.vectors)
    if weights.lam > 0:
        g += weights.lam * velocity_bending_gradient(v).vectors
    data_deriv = None
    if similarity == "ncc":
        if inv_map is None:
            inv_map = integrate_inverse(v, K)
        data_deriv = similarity_loss_gradient(warp(atlas, inv_map), image, "ncc")
    cache = {}
    for t in _time_samples(T):
        p0 = integrate(_scaled(v, -t), K)
        p1 = integrate(_scaled(v, 1.0 - t), K)
        det1 = jacobian_determinant(p1)
        atlas_t = warp(atlas, p0)
        image_t = warp(image, p1)
        if similarity == "mse":
            residual = 2.0 * (atlas_t.values - image_t.values)
        else:
            residual = warp(data_deriv, p1).values
        g += (
            (-weights.sim_weight / T)
            * (det1.values * residual)[..., None]
            * gradient(atlas_t).vectors
        )
        if want_cache:
            cache[t] = {"p0": p0, "p1": p1, "det1": det1, "image_t": image_t}
    return g, cache


def el_gradient_vanilla(
    atlas: ScalarField,
    image: ScalarField,
    v: VectorField,
    weights: LossWeights,
    quadrature_samples: int = 8,
    squaring_steps: int = 6,
    similarity: str = "mse",
) -> VectorField:
    """Gradient of the single-image objective (gamma1 = gamma2 = 0)."""
    if atlas.shape.dims != image.shape.dims or atlas.shape.dims != v.shape.dims:
        raise ValueError("atlas, image, and velocity must share one grid")
    g, _ = _vanilla_core(
        atlas, image, v, weights, int(quadrature_samples), int(squaring_steps), similarity
    )
    return VectorField(v.shape, g)


def _forward_mean_tolerant(warped: list, dets: list) -> tuple:
    """Jacobian-weighted mean with a plain-mean fallback at weightless voxels.

    One-sided border differences can push every determinant of a two-image
    pair below zero at a clamped corner, making the weighted mean 0/0 there.
    Inside a long optimization that is an artifact, not a modeling failure:
    such voxels take the unweighted mean and report zero total weight, so
    they drop out of the gradient instead of aborting the run.  The public
    ``atlas_forward`` keeps its strict contract.
    """
    shape = warped[0].shape
    num = np.zeros(shape.dims)
    den = np.zeros(shape.dims)
    for w, j in zip(warped, dets):
        weight = np.maximum(j.values, 0.0)
        num += w.values * weight
        den += weight
    bad = den <= WEIGHT_EPS
    plain = np.mean([w.values for w in warped], axis=0)
    mean = np.where(bad, plain, num / np.where(bad, 1.0, den))
    return ScalarField(shape, mean), ScalarField(shape, np.where(bad, 0.0, den))


def el_gradient_pairwise(
    atlas: ScalarField,
    images: list,
    velocities: list,
    weights: LossWeights,
    quadrature_samples: int = 8,
    squaring_steps: int = 6,
    similarity: str = "mse",
    pairs: list | None = None,
) -> GradientReport:
    """Gradients of the summed pair objective for every image of a cohort.

    ``pairs`` restricts the loss bookkeeping; the gradients always treat the
    given image list as the full cohort (all pairs), which is how the driver
    uses this: sampled pairs are passed as two-image cohorts.

    With gamma1 = gamma2 = 0 each gradient equals (N-1) times the vanilla
    single-image gradient.
    """
    n = len(images)
    if n < 2 or len(velocities) != n:
        raise ValueError("need >= 2 images and one velocity per image")
    T = int(quadrature_samples)
    K = int(squaring_steps)
    g1, g2 = weights.gamma1, weights.gamma2

    fwd = [integrate(v, K) for v in velocities]
    inv = [integrate_inverse(v, K) for v in velocities]
    warped = [warp(images[i], fwd[i]) for i in range(n)]
    dets = [jacobian_determinant(f) for f in fwd]

    mean_warped = atlas_backward(warped) if g1 > 0 else None
    tilde, det_sum = _forward_mean_tolerant(warped, dets) if g2 > 0 else (None, None)

    # image i carried into image j's space through the composed map
    into = {}
    if g2 > 0:
        for i in range(n):
            for j in range(n):
                if i != j:
                    into[(i, j)] = warp(images[i], compose(fwd[i], inv[j]))

    losses = _loss_breakdown(
        atlas, images, velocities, inv, fwd, warped, into, weights, similarity, pairs
    )

    grads = []
    for i in range(n):
        g, cache = _vanilla_core(
            atlas,
            images[i],
            velocities[i],
            weights,
            T,
            K,
            similarity,
            inv_map=inv[i],
            want_cache=(g1 > 0 or g2 > 0),
        )
        g = float(n - 1) * g
        if g1 > 0 or g2 > 0:
            if similarity == "ncc":
                ga = np.zeros(atlas.shape.dims)
                gb = np.zeros(atlas.shape.dims)
                for j in range(n):
                    if j == i:
                        continue
                    if g1 > 0:
                        ga += similarity_loss_gradient(warped[i], warped[j], "ncc").values
                    if g2 > 0:
                        gz = similarity_loss_gradient(into[(i, j)], images[j], "ncc")
                        gb += dets[j].values * warp(gz, fwd[j]).values
                ga_field = ScalarField(atlas.shape, ga)
                gb_field = ScalarField(atlas.shape, gb)
            for t, entry in cache.items():
                p0, p1 = entry["p0"], entry["p1"]
                image_t = entry["image_t"]
                det0 = jacobian_determinant(p0)
                grad_image_t = gradient(image_t).vectors
                if g1 > 0:
                    if similarity == "mse":
                        hat_t = warp(mean_warped, p0)
                        res = 2.0 * n * (hat_t.values - image_t.values)
                        g += (-g1 / T) * (det0.values * res)[..., None] * grad_image_t
                    else:
                        pulled = warp(ga_field, p0).values
                        g += (g1 / T) * (det0.values * pulled)[..., None] * grad_image_t
                if g2 > 0:
                    if similarity == "mse":
                        tilde_t = warp(tilde, p0)
                        w_t = warp(det_sum, p0)
                        res = 2.0 * (tilde_t.values - image_t.values)
                        g += (
                            (-g2 / T)
                            * (w_t.values * det0.values * res)[..., None]
                            * grad_image_t
                        )
                    else:
                        pulled = warp(gb_field, p0).values
                        g += (g2 / T) * (det0.values * pulled)[..., None] * grad_image_t
                    det1 = entry["det1"]
                    for j in range(n):
                        if j == i:
                            continue
                        cross_t = warp(images[j], compose(fwd[j], p0))
                        grad_cross = gradient(cross_t).vectors
                        if similarity == "mse":
                            res = 2.0 * (cross_t.values - image_t.values)
                            g += (-g2 / T) * (det1.values * res)[..., None] * grad_cross
                        else:
                            gc = similarity_loss_gradient(into[(j, i)], images[i], "ncc")
                            pulled = warp(gc, p1).values
                            g += (-g2 / T) * (det1.values * pulled)[..., None] * grad_cross
        grads.append(VectorField(velocities[i].shape, g))

    max_norm = max(gr.max_norm() for gr in grads)
    return GradientReport(grads, losses, max_norm, fwd, inv, warped, dets)


def _loss_breakdown(
    atlas,
    images,
    velocities,
    inv,
    fwd,
    warped,
    into,
    weights,
    similarity,
    pairs,
):
    n = len(images)
    if pairs is None:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    sim_i = [similarity_loss(warp(atlas, inv[i]), images[i], similarity) for i in range(n)]
    reg_i = [velocity_bending(v) for v in velocities]
    out = {"total": 0.0, "sim": 0.0, "reg": 0.0, "pair_atlas": 0.0, "pair_image": 0.0}
    for i, j in pairs:
        sim = sim_i[i] + sim_i[j]
        reg = reg_i[i] + reg_i[j]
        # zero-weighted terms are skipped, not evaluated; they log as 0
        pa = (
            similarity_loss(warped[i], warped[j], similarity) if weights.gamma1 > 0 else 0.0
        )
        if weights.gamma2 > 0:
            pi = similarity_loss(into[(i, j)], images[j], similarity) + similarity_loss(
                into[(j, i)], images[i], similarity
            )
        else:
            pi = 0.0
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


@dataclass
class OptimizerState:
    """Per-velocity optimizer memory (first/second moments for Adam)."""

    method: str
    step_size: float
    m: np.ndarray | None = None
    u: np.ndarray | None = None
    t: int = 0

    def reset_moments(self):
        self.m = None
        self.u = None
        self.t = 0


def update_velocity(v: VectorField, grad: VectorField, state: OptimizerState) -> VectorField:
    """One descent step; adaptive_moments uses decay 0.9/0.999, offset 1e-8."""
    g = grad.vectors
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient in velocity update")
    if state.method == "steepest_descent":
        new = v.vectors - state.step_size * g
    elif state.method == "adaptive_moments":
        if state.m is None:
            state.m = np.zeros_like(g)
            state.u = np.zeros_like(g)
        state.t += 1
        state.m = 0.9 * state.m + 0.1 * g
        state.u = 0.999 * state.u + 0.001 * g * g
        m_hat = state.m / (1.0 - 0.9**state.t)
        u_hat = state.u / (1.0 - 0.999**state.t)
        new = v.vectors - state.step_size * m_hat / (np.sqrt(u_hat) + 1e-8)
    else:
        raise ValueError(f"unknown method {state.method!r}")
    if not np.all(np.isfinite(new)):
        raise NumericError(
            "velocity update produced non-finite values",
            {"step_size": state.step_size, "grad_max": float(np.abs(g).max())},
        )
    return VectorField(v.shape, new)


def _sample_pairs(n: int, sampling: str, rng: np.random.Generator) -> list:
    if sampling == "all_pairs":
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    perm = rng.permutation(n)
    return [(int(perm[2 * k]), int(perm[2 * k + 1])) for k in range(n // 2)]


def run_atlas_build(cohort: Cohort, config: OptimConfig, snapshot_fn=None):
    """Alternate velocity descent with atlas refreshes over the whole cohort.

    Per epoch: sample pairs, descend each member's velocity along the pair
    gradient, then update the atlas — closed-form modes recompute it from the
    freshly warped images every ``atlas_refresh_period`` epochs, learned mode
    applies the accumulated gradient at the end of every epoch.  Returns the
    final AtlasState and one log row per epoch; everything except wall_time
    is deterministic for a fixed seed.

    Raises NumericError (with epoch diagnostics) as soon as any loss or
    gradient goes non-finite.
    """
    n = len(cohort)
    if n < 2:
        raise ValueError("atlas building needs a cohort of >= 2 images")
    rng = np.random.default_rng(config.seed)
    state = AtlasState(
        atlas=init_atlas(cohort),
        velocities=[VectorField.zeros(cohort.shape) for _ in range(n)],
        mode=config.atlas_mode,
    )
    opt_states = [
        OptimizerState(config.method, config.step_size) for _ in range(n)
    ]
    workers = config.threads if config.threads > 0 else (os.cpu_count() or 1)
    log = []
    for epoch in range(1, config.epochs + 1):
        t_start = time.perf_counter()
        pairs = _sample_pairs(n, config.pair_sampling, rng)
        totals = {"total": 0.0, "sim": 0.0, "reg": 0.0, "pair_atlas": 0.0, "pair_image": 0.0}
        fold_counts = []
        covered = []
        if config.atlas_mode == "learned":
            state.reset_accumulator()

        if config.pair_sampling == "all_pairs":
            reports = [
                (
                    list(range(n)),
                    el_gradient_pairwise(
                        state.atlas,
                        cohort.images,
                        state.velocities,
                        config.weights,
                        config.quadrature_samples,
                        config.squaring_steps,
                        config.similarity,
                    ),
                )
            ]
        else:
            def _pair_report(pair):
                i, j = pair
                return el_gradient_pairwise(
                    state.atlas,
                    [cohort.images[i], cohort.images[j]],
                    [state.velocities[i], state.velocities[j]],
                    config.weights,
                    config.quadrature_samples,
                    config.squaring_steps,
                    config.similarity,
                )

            if workers > 1 and len(pairs) > 1:
                with ThreadPoolExecutor(max_workers=workers) as ex:
                    reps = list(ex.map(_pair_report, pairs))
            else:
                reps = [_pair_report(p) for p in pairs]
            reports = [([i, j], rep) for (i, j), rep in zip(pairs, reps)]

        for members, rep in reports:
            for key in totals:
                totals[key] += rep.losses[key]
            if not np.isfinite(rep.losses["total"]):
                raise NumericError(
                    "non-finite loss during atlas build",
                    {"epoch": epoch, "losses": rep.losses},
                )
            for slot, idx in enumerate(members):
                state.velocities[idx] = update_velocity(
                    state.velocities[idx], rep.gradients[slot], opt_states[idx]
                )
                fold_counts.append(count_folds(rep.inv_maps[slot]))
                covered.append(idx)
                if config.atlas_mode == "learned":
                    state.accumulate(
                        atlas_data_gradient(
                            state.atlas,
                            cohort.images[idx],
                            rep.fwd_maps[slot],
                            rep.jac_dets[slot],
                            config.similarity,
                        )
                    )

        if config.atlas_mode == "learned":
            # images left out by odd-cohort pairing still contribute
            for idx in range(n):
                if idx not in covered:
                    fwd = integrate(state.velocities[idx], config.squaring_steps)
                    state.accumulate(
                        atlas_data_gradient(
                            state.atlas, cohort.images[idx], fwd, None, config.similarity
                        )
                    )
            apply_learned_update(state, config.atlas_step)
            if config.similarity == "ncc":
                recenter_atlas(
                    state, float(np.mean([im.values.mean() for im in cohort.images]))
                )
        elif epoch % config.atlas_refresh_period == 0:
            fwd_maps = [integrate(v, config.squaring_steps) for v in state.velocities]
            warped = [warp(cohort.images[i], fwd_maps[i]) for i in range(n)]
            if config.atlas_mode == "closed_form_forward":
                dets = [jacobian_determinant(f) for f in fwd_maps]
                state.atlas, _ = _forward_mean_tolerant(warped, dets)
            else:
                state.atlas = atlas_backward(warped)
            if config.reset_momentum_on_refresh:
                for s in opt_states:
                    s.reset_moments()

        if snapshot_fn is not None and epoch % config.atlas_refresh_period == 0:
            snapshot_fn(epoch, state)

        log.append(
            {
                "epoch": epoch,
                "total": totals["total"],
                "sim": totals["sim"],
                "reg": totals["reg"],
                "pair_atlas": totals["pair_atlas"],
                "pair_image": totals["pair_image"],
                "folds": float(np.mean(fold_counts)) if fold_counts else 0.0,
                "wall_time": time.perf_counter() - t_start,
            }
        )
    return state, log


def register_image(atlas: ScalarField, image: ScalarField, config: OptimConfig):
    """Register one image to a frozen atlas (single-image objective).

    Returns the final velocity and a per-epoch log with the same columns as
    run_atlas_build (pair terms are zero).
    """
    v = VectorField.zeros(image.shape)
    opt = OptimizerState(config.method, config.step_size)
    log = []
    for epoch in range(1, config.epochs + 1):
        t_start = time.perf_counter()
        grad = el_gradient_vanilla(
            atlas,
            image,
            v,
            config.weights,
            config.quadrature_samples,
            config.squaring_steps,
            config.similarity,
        )
        inv = integrate_inverse(v, config.squaring_steps)
        sim = similarity_loss(warp(atlas, inv), image, config.similarity)
        reg = velocity_bending(v)
        total = config.weights.sim_weight * sim + config.weights.lam * reg
        if not np.isfinite(total):
            raise NumericError("non-finite loss during registration", {"epoch": epoch})
        v = update_velocity(v, grad, opt)
        log.append(
            {
                "epoch": epoch,
                "total": total,
                "sim": sim,
                "reg": reg,
                "pair_atlas": 0.0,
                "pair_image": 0.0,
                "folds": float(count_folds(inv)),
                "wall_time": time.perf_counter() - t_start,
            }
        )
    return v, log
