"""Sample-size, MDE and power calculations.

All solvers take one scalar summary of the metric's noise, the effective
SD (residual SD divided by the denominator mean). Whatever the metric kind,
it plays the role the plain standard deviation plays for a difference of
means. ``n`` is always the total number of units across both arms and
``psi`` the fraction assigned to treatment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

from .core_stats import NormalTail, normal_cdf, normal_quantile
from .errors import DomainError, SpecError
from .estimators import ArmEstimate, MetricKind

__all__ = [
    "VarianceProfile",
    "PowerSpec",
    "PowerSolution",
    "SkewnessWarning",
    "allocation_factor",
    "planning_se",
    "solve_mde",
    "solve_n",
    "solve_power",
    "solve",
    "skewness_warning",
]

SKEW_PSI_RANGE = (0.4, 0.6)
SKEW_LIMIT = 1.0


class SkewnessWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VarianceProfile:
    residual_sd: float
    denom_mean: float = 1.0
    metric_kind: MetricKind = MetricKind.MEAN
    source_n: int = 0

    def __post_init__(self):
        if not self.residual_sd >= 0.0 or not math.isfinite(self.residual_sd):
            raise DomainError(f"residual_sd must be finite and nonnegative, got {self.residual_sd!r}")
        if not self.denom_mean > 0.0 or not math.isfinite(self.denom_mean):
            raise DomainError(f"denom_mean must be finite and positive, got {self.denom_mean!r}")
        object.__setattr__(self, "metric_kind", MetricKind(self.metric_kind))

    @property
    def effective_sd(self) -> float:
        return self.residual_sd / self.denom_mean

    @classmethod
    def from_arm(cls, arm: ArmEstimate) -> "VarianceProfile":
        return cls(arm.residual_sd, arm.denom_mean, arm.metric_kind, arm.n_units)


@dataclass(frozen=True)
class PowerSpec:
    alpha: float = 0.05
    power: float | None = None
    mde: float | None = None
    n: int | None = None
    psi: float = 0.5
    tail: NormalTail = NormalTail.ONE_SIDED

    def __post_init__(self):
        object.__setattr__(self, "tail", NormalTail.parse(self.tail))
        _check_open_unit("alpha", self.alpha)
        _check_open_unit("psi", self.psi)
        if self.power is not None:
            _check_open_unit("power", self.power)
        if self.mde is not None and not self.mde > 0.0:
            raise DomainError(f"mde must be positive, got {self.mde!r}")
        if self.n is not None and (int(self.n) != self.n or self.n < 2):
            raise DomainError(f"n must be an integer >= 2, got {self.n!r}")

    @property
    def target(self) -> str:
        missing = [k for k in ("power", "mde", "n") if getattr(self, k) is None]
        if len(missing) != 1:
            if missing:
                raise SpecError(f"underdetermined power spec: {', '.join(missing)} all missing; supply all but one")
            raise SpecError("overdetermined power spec: power, mde and n all given; leave one out")
        return missing[0]


@dataclass(frozen=True)
class PowerSolution:
    alpha: float
    power: float
    mde: float
    n: int
    psi: float
    tail: NormalTail
    target: str
    effective_sd: float
    planning_se: float
    allocation_factor: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tail"] = self.tail.value
        return d


def _check_open_unit(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and 0.0 < value < 1.0):
        raise DomainError(f"{name} must lie strictly between 0 and 1, got {value!r}")


def allocation_factor(psi: float) -> float:
    """SE multiplier sqrt(1/(1-psi) + 1/psi); equals 2 at an even split."""
    _check_open_unit("psi", psi)
    return math.sqrt(1.0 / (1.0 - psi) + 1.0 / psi)


def planning_se(profile: VarianceProfile, n: int, psi: float = 0.5) -> float:
    if n < 2:
        raise DomainError(f"n must be at least 2, got {n!r}")
    return allocation_factor(psi) * profile.effective_sd / math.sqrt(n)


def _z_sum(alpha: float, power: float, tail: NormalTail | str) -> float:
    _check_open_unit("power", power)
    return NormalTail.parse(tail).critical_value(alpha) + normal_quantile(power)


def solve_mde(alpha: float, power: float, se: float, tail: NormalTail | str = NormalTail.ONE_SIDED) -> float:
    if not se >= 0.0:
        raise DomainError(f"se must be nonnegative, got {se!r}")
    return _z_sum(alpha, power, tail) * se


def solve_power(
    alpha: float,
    mde: float,
    profile: VarianceProfile,
    n: int,
    psi: float = 0.5,
    tail: NormalTail | str = NormalTail.ONE_SIDED,
) -> float:
    """Power against an effect of size ``mde``.

    For two-sided tests only the tail in the direction of the effect counts.
    """
    if not mde > 0.0:
        raise DomainError(f"mde must be positive, got {mde!r}")
    zcrit = NormalTail.parse(tail).critical_value(alpha)
    se = planning_se(profile, n, psi)
    if se == 0.0:
        return 1.0
    return normal_cdf(mde / se - zcrit)


def solve_n(
    alpha: float,
    power: float,
    mde: float,
    profile: VarianceProfile,
    psi: float = 0.5,
    tail: NormalTail | str = NormalTail.ONE_SIDED,
) -> int:
    """Smallest total sample size reaching ``power``; never under-powered after rounding."""
    if not mde > 0.0:
        raise DomainError(f"mde must be positive, got {mde!r}")
    raw = _z_sum(alpha, power, tail) ** 2 * allocation_factor(psi) ** 2 * (profile.effective_sd / mde) ** 2
    n = max(2, math.ceil(raw * (1.0 - 1e-12)))
    # tolerance absorbs rounding when raw sits exactly on an integer
    while solve_power(alpha, mde, profile, n, psi, tail) < power - 1e-12:
        n += 1
    return n


def solve(spec: PowerSpec, profile: VarianceProfile) -> PowerSolution:
    """Fill in whichever of power, mde or n is missing from ``spec``."""
    target = spec.target
    power, mde, n = spec.power, spec.mde, spec.n
    if target == "n":
        n = solve_n(spec.alpha, power, mde, profile, spec.psi, spec.tail)
    elif target == "mde":
        mde = solve_mde(spec.alpha, power, planning_se(profile, n, spec.psi), spec.tail)
    else:
        power = solve_power(spec.alpha, mde, profile, n, spec.psi, spec.tail)
    return PowerSolution(
        alpha=spec.alpha,
        power=power,
        mde=mde,
        n=int(n),
        psi=spec.psi,
        tail=spec.tail,
        target=target,
        effective_sd=profile.effective_sd,
        planning_se=planning_se(profile, n, spec.psi),
        allocation_factor=allocation_factor(spec.psi),
    )


def skewness_warning(skewness: float, psi: float, emit: bool = True) -> str | None:
    """Warn when an uneven split meets skewed data.

    Skewness cancels between arms only for an even split; otherwise normal
    approximations to the p-value can be poor. Returns the message, or None.
    """
    lo, hi = SKEW_PSI_RANGE
    if lo <= psi <= hi or not abs(skewness) > SKEW_LIMIT:
        return None
    msg = (
        f"skewness {skewness:.3g} with an uneven split (psi={psi:g}): "
        "normal-approximation p-values may be inaccurate at this sample size"
    )
    if emit:
        warnings.warn(msg, SkewnessWarning, stacklevel=2)
    return msg
