"""Normal distribution functions and numerically careful sample moments."""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError, UndefinedSkewnessError

__all__ = [
    "NormalTail",
    "normal_cdf",
    "normal_quantile",
    "sample_mean_var",
    "sample_skewness",
]


class NormalTail(str, enum.Enum):
    ONE_SIDED = "one_sided"
    TWO_SIDED = "two_sided"

    @classmethod
    def parse(cls, value: "NormalTail | str") -> "NormalTail":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"one": cls.ONE_SIDED, "1": cls.ONE_SIDED, "two": cls.TWO_SIDED, "2": cls.TWO_SIDED}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise DomainError(f"unknown tail {value!r}; expected one|two") from None

    def critical_probability(self, alpha: float) -> float:
        """Quantile argument for significance level ``alpha`` (1 - alpha or 1 - alpha/2)."""
        if not 0.0 < alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {alpha!r}")
        return 1.0 - alpha / 2.0 if self is NormalTail.TWO_SIDED else 1.0 - alpha

    def critical_value(self, alpha: float) -> float:
        return normal_quantile(self.critical_probability(alpha))


# Acklam's rational approximation (relative error ~1.15e-9 before refinement).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def normal_quantile(p: float) -> float:
    """Inverse of the standard normal CDF.

    Acklam's approximation followed by one Halley step against ``erfc``.
    The upper half is computed by reflection so that the refinement always
    works on the lower tail, where ``erfc`` keeps full relative precision.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -normal_quantile(1.0 - p)
    x = _acklam(p)
    e = 0.5 * math.erfc(-x / _SQRT2) - p
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def normal_cdf(z: float) -> float:
    z = float(z)
    if not math.isfinite(z):
        raise DomainError(f"normal_cdf needs a finite argument, got {z!r}")
    return 0.5 * math.erfc(-z / _SQRT2)


def sample_mean_var(xs: Sequence[float] | np.ndarray, df_loss: int = 1) -> tuple[float, float]:
    """Mean and variance with denominator ``n - df_loss``.

    Uses the corrected two-pass algorithm: the second-pass sum of deviations
    compensates for rounding in the first-pass mean.
    """
    x = np.asarray(xs, dtype=float).ravel()
    n = x.size
    if df_loss < 0:
        raise DomainError(f"df_loss must be nonnegative, got {df_loss}")
    if n <= df_loss:
        raise InsufficientDataError(f"need more than {df_loss} values, got {n}")
    mean = float(np.mean(x)) if n else math.nan
    d = x - mean
    ss = float(d @ d) - float(np.sum(d)) ** 2 / n
    return mean, max(ss, 0.0) / (n - df_loss)


def sample_skewness(xs: Sequence[float] | np.ndarray) -> float:
    """Population (biased) skewness m3 / m2**1.5."""
    x = np.asarray(xs, dtype=float).ravel()
    if x.size < 3:
        raise InsufficientDataError(f"skewness needs at least 3 values, got {x.size}")
    d = x - np.mean(x)
    m2 = float(np.mean(d * d))
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    if m2 <= (1e-14 * scale) ** 2:
        raise UndefinedSkewnessError("skewness is undefined for zero-variance data")
    m3 = float(np.mean(d * d * d))
    return m3 / m2**1.5
