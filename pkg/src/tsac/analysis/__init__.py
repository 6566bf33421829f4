from .formulas import (
    VarianceModel,
    WindowModel,
    averaged_grad_variance,
    bootstrap_ratio,
    bootstrap_ratio_bounds,
    combination_variance,
    coverage_probability,
    coverage_probability_lmin1,
    effective_sample_size,
    expected_reuse,
    geometric_sums,
    kappa_star,
    mean_reuse,
    mean_reuse_untruncated,
    reuse_last,
    reuse_last_lmin1,
    reward_bearing_updates,
    reward_ratio,
    reward_variances,
    sparse_amplification,
    total_ratio,
    triangular_weights,
    uniform_weights_optimal,
)
from .oracles import mc_oracle

__all__ = [name for name in dir() if not name.startswith("_")]
