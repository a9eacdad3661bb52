"""Numeric inversion of deformation maps without access to a velocity field.

Minimizes the symmetric inverse-consistency objective

    F(phi) = mean_int |Phi(phi(x)) - x|^2 + mean_int |phi(Phi(x)) - x|^2

over interior voxels (clamp-to-border sampling), starting from the negated
displacement phi_0 = Id - u.  Units are squared voxels.  The first term's
gradient goes through the interpolated Jacobian of Phi; the second term's
gradient is the exact multilinear scatter (adjoint of the sampling), and an
accept/reject rule on top of the adaptive-moments step keeps the objective
non-increasing across accepted iterations.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import NonInvertibleMapError
from .grid import DeformationMap, VectorField, identity_coords, _sample


def _splat(values: np.ndarray, coords: np.ndarray, dims: tuple) -> np.ndarray:
    """Scatter-add vector values at fractional coords with multilinear weights.

    Adjoint of clamp-to-border multilinear sampling: coords are clamped to
    the domain before weights are formed.
    """
    d = len(dims)
    flat_vals = values.reshape(-1, values.shape[-1])
    pts = coords.reshape(-1, d)
    pts = np.clip(pts, 0.0, np.array(dims, dtype=np.float64) - 1.0)
    lo = np.floor(pts).astype(np.int64)
    # keep lo+1 in range; fractional part adjusts automatically at the top edge
    lo = np.minimum(lo, np.array(dims) - 2)
    frac = pts - lo
    out = np.zeros((int(np.prod(dims)), values.shape[-1]))
    for corner in itertools.product((0, 1), repeat=d):
        idx = lo + np.array(corner)
        w = np.ones(len(pts))
        for a in range(d):
            w *= frac[:, a] if corner[a] else 1.0 - frac[:, a]
        flat_idx = np.ravel_multi_index(tuple(idx[:, a] for a in range(d)), dims)
        np.add.at(out, flat_idx, w[:, None] * flat_vals)
    return out.reshape(dims + (values.shape[-1],))


def _interior_mask(dims: tuple) -> np.ndarray:
    mask = np.zeros(dims)
    mask[tuple(slice(1, n - 1) for n in dims)] = 1.0
    return mask


def _objective(u_phi: np.ndarray, mapping: DeformationMap, mask, n_int, ident):
    u_map = mapping.displacement.vectors
    d = u_map.shape[-1]
    phi_coords = ident + u_phi
    # A = Phi(phi(x)) - x
    A = u_phi.copy()
    for k in range(d):
        A[..., k] += _sample(u_map[..., k], phi_coords, order=1)
    map_coords = ident + u_map
    # B = phi(Phi(x)) - x
    B = u_map.copy()
    for k in range(d):
        B[..., k] += _sample(u_phi[..., k], map_coords, order=1)
    f1 = float(((A**2).sum(axis=-1) * mask).sum() / n_int)
    f2 = float(((B**2).sum(axis=-1) * mask).sum() / n_int)
    return f1 + f2, A, B


def _gradient(u_phi, mapping, mask, n_int, ident, jac_u, A, B):
    u_map = mapping.displacement.vectors
    d = u_map.shape[-1]
    dims = u_map.shape[:-1]
    phi_coords = ident + u_phi
    Am = A * mask[..., None]
    # first term: (I + Du(phi))^T A
    g = Am.copy()
    for a in range(d):
        for k in range(d):
            g[..., a] += _sample(jac_u[k][a], phi_coords, order=1) * Am[..., k]
    # second term: scatter the masked residual at the map's targets
    g += _splat(B * mask[..., None], ident + u_map, dims)
    return 2.0 / n_int * g


def numeric_inverse(
    mapping: DeformationMap,
    max_iters: int = 2000,
    step: float = 1e-2,
    tol: float = 1e-8,
    fail_threshold: float = 1.0,
    return_info: bool = False,
):
    """Invert a map by descent on the symmetric consistency objective.

    Parameters
    ----------
    mapping : DeformationMap
    max_iters, step, tol : optimizer controls (adaptive moments; a step that
        would increase the objective is rejected and the step size halved).
    fail_threshold : mean squared residual above which the map is declared
        non-invertible (raises NonInvertibleMapError carrying the residual).
    return_info : also return a dict with the residual and the per-accepted-
        iteration objective history.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    shape = mapping.shape
    dims = shape.dims
    mask = _interior_mask(dims)
    n_int = mask.sum()
    ident = identity_coords(shape)
    u_map = mapping.displacement.vectors
    jac_u = [np.gradient(u_map[..., k]) for k in range(shape.ndim)]

    u_phi = -u_map.copy()
    f_curr, A, B = _objective(u_phi, mapping, mask, n_int, ident)
    history = [f_curr]
    m = np.zeros_like(u_phi)
    s = np.zeros_like(u_phi)
    t = 0
    scale = step
    for _ in range(max_iters):
        g = _gradient(u_phi, mapping, mask, n_int, ident, jac_u, A, B)
        t += 1
        m_new = 0.9 * m + 0.1 * g
        s_new = 0.999 * s + 0.001 * g * g
        m_hat = m_new / (1.0 - 0.9**t)
        s_hat = s_new / (1.0 - 0.999**t)
        candidate = u_phi - scale * m_hat / (np.sqrt(s_hat) + 1e-8)
        f_new, A_new, B_new = _objective(candidate, mapping, mask, n_int, ident)
        if f_new <= f_curr:
            improvement = f_curr - f_new
            u_phi, f_curr, A, B = candidate, f_new, A_new, B_new
            m, s = m_new, s_new
            history.append(f_curr)
            if improvement < tol:
                break
        else:
            t -= 1
            scale *= 0.5
            if scale < 1e-14:
                break
    if f_curr > fail_threshold:
        raise NonInvertibleMapError(
            f"inverse residual {f_curr:.4g} exceeds threshold {fail_threshold:g}",
            residual=f_curr,
        )
    result = DeformationMap(VectorField(shape, u_phi))
    if return_info:
        return result, {"residual": f_curr, "iterations": len(history) - 1, "history": history}
    return result
