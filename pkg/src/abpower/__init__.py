"""Standard errors and power analysis for A/B tests on means and ratios of means.

Clustered data, ratio metrics and regression covariate adjustment are all
handled by one rule: the SE of an arm is the sample SD of a suitable residual
over ``sqrt(n)``, divided by the denominator mean for ratios.
"""

from .aggregation import ClusterRow, ClusterTable, EventRecord, EventTable, aggregate, aggregate_table
from .core_stats import NormalTail, normal_cdf, normal_quantile, sample_mean_var, sample_skewness
from .estimators import (
    ArmEstimate,
    EffectEstimate,
    MetricKind,
    OlsFit,
    estimate_arm,
    estimate_arm_adjusted_mean,
    estimate_arm_adjusted_ratio,
    estimate_arm_mean,
    estimate_arm_ratio,
    estimate_effect,
    fit_ols,
)
from .power import (
    PowerSolution,
    PowerSpec,
    VarianceProfile,
    allocation_factor,
    planning_se,
    solve,
    solve_mde,
    solve_n,
    solve_power,
)

__version__ = "0.1.0"
