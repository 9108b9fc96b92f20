"""Mean-vector tests for heteroscedastic, possibly high-dimensional split-plot designs."""

__version__ = "0.1.0"

from .projections import (  # noqa: E402,F401
    EffectDecomposition,
    ProjectionPair,
    averaging_matrix,
    centering_matrix,
    decompose_effects,
    kron_pair_projector,
    projector_from_hypothesis,
    standard_hypothesis,
    unit_projector,
)
from .model import (  # noqa: E402,F401
    SplitPlotDesign,
    SplitPlotSample,
    ar1_covariance,
    pooled_mean,
    sample,
)
from .estimators import (  # noqa: E402,F401
    TraceEstimates,
    estimate_traces,
    null_mean_estimate,
    subsampled_suite,
    tau_f_hat,
    trace_sigma,
    trace_sigma_pair,
    trace_sigma_sq,
    trace_tv_cube,
    trace_tv_cube_common,
    trace_tv_cube_common_subsampled,
    trace_tv_cube_subsampled,
    trace_tv_quartic,
    trace_tv_quartic_subsampled,
    trace_tv_sq,
)
from .engine import (  # noqa: E402,F401
    TestResult,
    factorial_battery,
    p_value_from,
    q_statistic,
    run_test,
    standardized_chi2_quantile,
    w_statistic,
)
from .oracle import (  # noqa: E402,F401
    EigenSpectrum,
    MomentPair,
    asymptotic_level,
    eigen_spectrum,
    exact_moments,
    representation_sampler,
    tau_cq,
    tau_p,
    trace_inequality_checks,
    trace_powers,
    v_matrix,
)
from .simulate import (  # noqa: E402,F401
    SimConfig,
    SimResult,
    power_study,
    subsample_overlap_study,
    type_one_error_study,
)
