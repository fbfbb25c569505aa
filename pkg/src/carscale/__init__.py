"""Intrinsic CAR Gaussian Markov random fields: scaling, priors, MCMC fitting."""

from .graphs import (
    ComponentPartition,
    Graph,
    GraphFormatError,
    connected_components,
    isolate_nodes,
    parse_graph,
    read_graph,
    serialize_graph,
    write_graph,
)
from .precision import (
    NormalizingInfo,
    NumericalError,
    SparseSymmetric,
    generalized_log_determinant,
    kappa_exponent,
    log_density,
    read_mtx,
    structure_matrix,
    write_mtx,
)
from .scaling import (
    ScaledCarModel,
    marginal_variances_dense,
    marginal_variances_sparse,
    scale_model,
    scaling_constant,
)
from .priors import (
    Bym2Spec,
    PcPriorSpec,
    PhiPrior,
    PriorError,
    bym2_covariance,
    gamma_prior_logpdf,
    pc_prior_phi_logpdf,
    pc_prior_precision_logpdf,
)
from .mcmc import (
    DiseaseMappingData,
    FitConfig,
    FitResult,
    ImproperPosteriorWarning,
    McmcError,
    dic,
    fit,
    fit_besag,
    fit_bym2,
    kappa_gibbs,
    read_mapping_csv,
    sample_prior,
)

__version__ = "0.1.0"
