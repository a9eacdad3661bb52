"""Groupwise diffeomorphic atlas construction with stationary velocity fields.

A cohort of images is registered to an emerging atlas by one velocity field
per image; the atlas itself has a closed-form solution (mean or
Jacobian-weighted mean of the warped images) or is learned by accumulated
gradient steps.  Pairwise image-alignment terms in atlas space and in the
native image spaces sharpen the correspondences, and the bending-energy
regularizer leaves affine motion free, so no pre-alignment is required.
"""

from .atlas import (
    AtlasState,
    Cohort,
    apply_learned_update,
    atlas_backward,
    atlas_data_gradient,
    atlas_forward,
    forward_data_term,
    init_atlas,
    recenter_atlas,
)
from .errors import (
    ConfigError,
    ConfigInfeasibleError,
    DegenerateIntensityError,
    DegenerateSimilarityError,
    DegenerateWeightsError,
    FormatError,
    NonInvertibleMapError,
    NumericError,
    SequencingError,
)
from .evaluation import (
    count_folds,
    dice,
    eval_atlas_space,
    eval_bridge,
    eval_image_space,
    fold_statistics,
    plurality_vote,
)
from .fileio import export_pgm, read_field, read_map, write_field
from .grid import (
    DeformationMap,
    GridShape,
    LabelField,
    ScalarField,
    VectorField,
    compose,
    gradient,
    hessian_components,
    identity_coords,
    interpolate,
    interpolate_vec,
    jacobian_determinant,
    warp,
    warp_labels,
    warp_vectors,
)
from .inverse import numeric_inverse
from .losses import (
    LossWeights,
    bending_energy,
    cohort_objective,
    mse,
    ncc_loss,
    ncc_loss_gradient,
    pair_atlas_loss,
    pair_image_loss,
    similarity_loss,
    similarity_loss_gradient,
    total_pair_objective,
    velocity_bending,
    velocity_bending_gradient,
)
from .optim import (
    GradientReport,
    OptimConfig,
    OptimizerState,
    el_gradient_pairwise,
    el_gradient_vanilla,
    fd_gradient,
    regularizer_gradient,
    register_image,
    run_atlas_build,
    update_velocity,
)
from .svf import integrate, integrate_inverse, integrate_partial
from .synth import SynthConfig, SynthResult, generate, make_template, normalize_intensity

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
