"""Label-overlap evaluation of atlas quality and map regularity.

Three overlap views, all built on warped segmentations and plurality votes:

* atlas space — each warped segmentation against the cohort consensus
  (O(M)); the pairwise variant compares all warped pairs directly (O(M^2)).
* image space — an atlas segmentation carried back into every image space.
* bridge — segmentation i carried through atlas space into image j's space
  for every ordered pair, voted per target, compared against S_j.  This is
  the label-transfer view of atlas quality.

Group rows average per image over the group's structures first, then take
mean/std over images ("all" = every foreground structure).  Standard
deviations are population (ddof = 0).
"""

from __future__ import annotations

import numpy as np

from .grid import DeformationMap, LabelField, compose, jacobian_determinant, warp_labels


def dice(a: LabelField, b: LabelField, structure: int) -> float:
    """Dice overlap of one structure: 2|A & B| / (|A| + |B|).

    Two empty masks count as perfect overlap (1.0); one empty mask gives 0.
    """
    if a.shape.dims != b.shape.dims:
        raise ValueError("label grids differ")
    if structure < 0:
        raise ValueError("structure must be >= 0")
    ma = a.labels == structure
    mb = b.labels == structure
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / denom


def plurality_vote(labels: list) -> LabelField:
    """Per-voxel most frequent label; ties resolve to the smallest label."""
    if not labels:
        raise ValueError("need at least one label field")
    dims = labels[0].shape.dims
    k_max = max(lab.num_structures for lab in labels)
    counts = np.zeros((k_max + 1,) + dims, dtype=np.int64)
    for lab in labels:
        if lab.shape.dims != dims:
            raise ValueError("all label fields must share one grid")
        for k in range(k_max + 1):
            counts[k] += lab.labels == k
    # argmax returns the first (smallest) label among tied counts
    return LabelField(labels[0].shape, counts.argmax(axis=0), k_max)


def count_folds(mapping: DeformationMap) -> int:
    """Number of interior voxels where the map's Jacobian determinant is negative."""
    det = jacobian_determinant(mapping).values
    return int((det[mapping.shape.interior()] < 0).sum())


def _structures(labels: list) -> list:
    return list(range(1, max(lab.num_structures for lab in labels) + 1))


def _stats(per_image: np.ndarray, structures: list) -> dict:
    """Per-structure and per-group mean/std over images.

    per_image has shape (num_images, num_structures); the "all" group
    averages each image over structures before aggregating.
    """
    out = {}
    for col, k in enumerate(structures):
        vals = per_image[:, col]
        out[str(k)] = (float(vals.mean()), float(vals.std()))
    group = per_image.mean(axis=1)
    out["all"] = (float(group.mean()), float(group.std()))
    return out


def eval_atlas_space(segs: list, fwd_maps: list, pairwise: bool = False) -> dict:
    """Overlap of forward-warped segmentations in atlas space.

    Default: each warped segmentation against the plurality consensus.
    ``pairwise=True`` instead averages Dice over all warped pairs i < j
    (statistics are then over pairs, not images).
    """
    m = len(segs)
    if m < 1 or len(fwd_maps) != m:
        raise ValueError("need >= 1 segmentation and one forward map each")
    warped = [warp_labels(segs[i], fwd_maps[i]) for i in range(m)]
    structures = _structures(segs)
    if pairwise:
        if m < 2:
            raise ValueError("pairwise overlap needs >= 2 segmentations")
        rows = []
        for i in range(m):
            for j in range(i + 1, m):
                rows.append([dice(warped[i], warped[j], k) for k in structures])
        return _stats(np.array(rows), structures)
    consensus = plurality_vote(warped)
    rows = [[dice(w, consensus, k) for k in structures] for w in warped]
    return _stats(np.array(rows), structures)


def eval_image_space(atlas_seg: LabelField, segs: list, inv_maps: list) -> dict:
    """Overlap of the atlas segmentation carried into every image space."""
    m = len(segs)
    if m < 1 or len(inv_maps) != m:
        raise ValueError("need one inverse map per segmentation")
    structures = _structures(segs + [atlas_seg])
    rows = []
    for i in range(m):
        carried = warp_labels(atlas_seg, inv_maps[i])
        rows.append([dice(carried, segs[i], k) for k in structures])
    return _stats(np.array(rows), structures)


def eval_bridge(segs: list, fwd_maps: list, inv_maps: list) -> dict:
    """Atlas-as-a-bridge label transfer.

    For every target j, each other segmentation is carried through atlas
    space by the composed map fwd_i o inv_j, the carried labels are voted,
    and the vote is compared against S_j.  Statistics are over targets.
    """
    m = len(segs)
    if m < 2 or len(fwd_maps) != m or len(inv_maps) != m:
        raise ValueError("need >= 2 segmentations with forward and inverse maps")
    structures = _structures(segs)
    rows = []
    for j in range(m):
        carried = [
            warp_labels(segs[i], compose(fwd_maps[i], inv_maps[j]))
            for i in range(m)
            if i != j
        ]
        voted = plurality_vote(carried)
        rows.append([dice(voted, segs[j], k) for k in structures])
    return _stats(np.array(rows), structures)


def fold_statistics(maps: list) -> tuple:
    """Mean and population std of interior fold counts across maps."""
    if not maps:
        raise ValueError("need at least one map")
    counts = np.array([count_folds(m) for m in maps], dtype=np.float64)
    return float(counts.mean()), float(counts.std())
