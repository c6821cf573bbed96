"""Multi-atlas segmentation as continuous max-flow on a graph of images."""

__version__ = "0.1.0"

from .annotations import (  # noqa: E402
    UNLABELLED,
    LabelVolume,
    SlicewiseConfig,
    coverage,
    random_offset,
    subsample_slicewise,
    synthetic_scribbles,
    validate_annotation,
)
from .graph import Configuration, GraphProblem, build_problem, encode_data_term  # noqa: E402
from .solver import (  # noqa: E402
    SolverConfig,
    brute_force_mrf_oracle,
    discrete_energy,
    discretise,
    solve,
    solve_binary,
    solve_potts,
)
from .volume import Volume, VectorField, divergence, gradient, gradient_magnitude_sq  # noqa: E402
from .weighting import (  # noqa: E402
    LocalWeightConfig,
    RegularisationConfig,
    alpha_from_gradient,
    beta_locally_weighted,
    beta_uniform,
    nmi,
    select_atlases,
)

__all__ = [
    "UNLABELLED",
    "Configuration",
    "GraphProblem",
    "LabelVolume",
    "LocalWeightConfig",
    "RegularisationConfig",
    "SlicewiseConfig",
    "SolverConfig",
    "VectorField",
    "Volume",
    "alpha_from_gradient",
    "beta_locally_weighted",
    "beta_uniform",
    "brute_force_mrf_oracle",
    "build_problem",
    "coverage",
    "discrete_energy",
    "discretise",
    "divergence",
    "encode_data_term",
    "gradient",
    "gradient_magnitude_sq",
    "nmi",
    "random_offset",
    "select_atlases",
    "solve",
    "solve_binary",
    "solve_potts",
    "subsample_slicewise",
    "synthetic_scribbles",
    "validate_annotation",
]
