"""Per-arm point estimates and residual-based standard errors.

Four metric kinds share one recipe: compute a residual per unit, take its
sample standard deviation ``s_r``, and divide by ``sqrt(n)`` times the
denominator mean.

==============  ===================  ==========================  ===================
kind            estimate             residual                    se
==============  ===================  ==========================  ===================
mean            ybar                 y - ybar                    s_y / sqrt(n)
ratio           ybar / wbar          y - theta * w               s_r / (sqrt(n) wbar)
adjusted_mean   mu_Y at xbar         y - yhat                    s_r / sqrt(n)
adjusted_ratio  mu_Y / mu_W at xbar  (y - yhat) - theta (w-what)  s_r / (sqrt(n) mu_W)
==============  ===================  ==========================  ===================

Variances are never expanded into covariance terms; residuals are formed
directly and their sums of squares taken.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.linalg import solve_triangular

from .aggregation import ClusterRow, ClusterTable, as_cluster_table
from .core_stats import NormalTail, normal_cdf, sample_mean_var
from .errors import (
    CollinearityError,
    DegenerateDenominatorError,
    DomainError,
    IncompatibleArmsError,
    InsufficientDataError,
)

PIVOT_TOL = 1e-10

ThetaMode = Literal["arm_adjusted", "unadjusted"]

__all__ = [
    "MetricKind",
    "OlsFit",
    "ArmEstimate",
    "EffectEstimate",
    "fit_ols",
    "estimate_arm",
    "estimate_arm_mean",
    "estimate_arm_ratio",
    "estimate_arm_adjusted_mean",
    "estimate_arm_adjusted_ratio",
    "estimate_effect",
    "common_mean",
]


class MetricKind(str, enum.Enum):
    MEAN = "mean"
    RATIO = "ratio"
    ADJUSTED_MEAN = "adjusted_mean"
    ADJUSTED_RATIO = "adjusted_ratio"

    @property
    def is_ratio(self) -> bool:
        return self in (MetricKind.RATIO, MetricKind.ADJUSTED_RATIO)

    @property
    def is_adjusted(self) -> bool:
        return self in (MetricKind.ADJUSTED_MEAN, MetricKind.ADJUSTED_RATIO)


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray  # intercept first
    fitted: np.ndarray
    residual_ss: float
    df: int
    rank_ok: bool = True

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    def predict(self, x: np.ndarray | Iterable[float]) -> float:
        x = np.asarray(x, dtype=float).ravel()
        return float(self.coefficients[0] + x @ self.coefficients[1:])


class _Design:
    """QR factorization of a centered, column-equilibrated design.

    The intercept column is handled analytically: after centering, every
    covariate column is orthogonal to the constant, so only the covariate
    block needs factoring. Columns are scaled to unit norm before the
    factorization, which makes the pivot threshold relative and the fit
    invariant to affine rescaling of any covariate.
    """

    def __init__(self, x_rows: np.ndarray, strict: bool = True):
        x = np.asarray(x_rows, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n, p = x.shape
        if n < p + 2:
            raise InsufficientDataError(f"least squares with {p} covariates needs at least {p + 2} rows, got {n}")
        if not np.isfinite(x).all():
            raise DomainError("covariates must be finite")
        self.n, self.p = n, p
        self.x_mean = x.mean(axis=0) if p else np.zeros(0)
        xc = x - self.x_mean
        xc -= xc.mean(axis=0)
        raw = np.linalg.norm(x, axis=0)
        norms = np.linalg.norm(xc, axis=0)
        keep = np.ones(p, dtype=bool)
        for j in range(p):
            if norms[j] <= PIVOT_TOL * raw[j] or norms[j] == 0.0:
                if strict:
                    raise CollinearityError(j, f"covariate column {j} is constant (collinear with the intercept)")
                keep[j] = False
        self.norms = np.where(keep, norms, 1.0)
        z = xc / self.norms
        self.keep = keep
        if p:
            q, r = np.linalg.qr(z[:, keep])
            diag = np.abs(np.diag(r))
            cols = np.flatnonzero(keep)
            bad = np.flatnonzero(diag < PIVOT_TOL)
            while bad.size:
                j = int(cols[bad[0]])
                if strict:
                    raise CollinearityError(j)
                keep[j] = False
                cols = np.flatnonzero(keep)
                q, r = np.linalg.qr(z[:, keep])
                diag = np.abs(np.diag(r))
                bad = np.flatnonzero(diag < PIVOT_TOL)
            self.q, self.r = q, r
        else:
            self.q = np.empty((n, 0))
            self.r = np.empty((0, 0))
        self.rank = 1 + int(keep.sum())

    def fit(self, response: np.ndarray) -> OlsFit:
        yv = np.asarray(response, dtype=float).ravel()
        if yv.shape[0] != self.n:
            raise DomainError(f"response has {yv.shape[0]} rows, design has {self.n}")
        if not np.isfinite(yv).all():
            raise DomainError("response must be finite")
        ybar = float(np.mean(yv))
        yc = yv - ybar
        yc -= np.mean(yc)
        slopes = np.zeros(self.p)
        if self.q.shape[1]:
            qty = self.q.T @ yc
            b = solve_triangular(self.r, qty)
            proj = self.q @ qty
            slopes[self.keep] = b / self.norms[self.keep]
        else:
            proj = np.zeros(self.n)
        resid = yc - proj
        intercept = ybar - float(self.x_mean @ slopes)
        return OlsFit(
            coefficients=np.concatenate(([intercept], slopes)),
            fitted=ybar + proj,
            residual_ss=float(resid @ resid),
            df=self.n - self.rank,
            rank_ok=self.rank == self.p + 1,
        )


def fit_ols(x_rows: np.ndarray, response: np.ndarray, strict: bool = True) -> OlsFit:
    """Least squares of ``response`` on an intercept plus the columns of ``x_rows``.

    Solved by Householder QR on centered, unit-norm columns; no normal
    equations are formed. A column whose pivot falls below ``1e-10`` of its
    norm raises ``CollinearityError`` naming the column, unless
    ``strict=False``, in which case the column gets a zero coefficient and
    ``rank_ok`` is False.
    """
    return _Design(x_rows, strict=strict).fit(response)


@dataclass(frozen=True)
class ArmEstimate:
    estimate: float
    denom_mean: float
    residual_sd: float
    n_units: int
    df: int
    se: float
    metric_kind: MetricKind
    residuals: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "metric_kind": self.metric_kind.value,
            "estimate": self.estimate,
            "denom_mean": self.denom_mean,
            "residual_sd": self.residual_sd,
            "effective_sd": self.residual_sd / self.denom_mean,
            "n_units": self.n_units,
            "df": self.df,
            "se": self.se,
        }


@dataclass(frozen=True)
class EffectEstimate:
    delta: float
    se: float
    z: float
    p_value: float
    tail: NormalTail
    ci_low: float
    ci_high: float
    alpha: float

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "se": self.se,
            "z": self.z,
            "p_value": self.p_value,
            "tail": self.tail.value,
            "alpha": self.alpha,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def _table(rows: ClusterTable | Iterable[ClusterRow], minimum: int) -> ClusterTable:
    t = as_cluster_table(rows)
    if len(t) < minimum:
        raise InsufficientDataError(f"need at least {minimum} units, got {len(t)}")
    return t


def _positive_mean(w: np.ndarray, label: str = "denominator mean") -> float:
    wbar = float(np.mean(w))
    if not wbar > 0.0:
        raise DegenerateDenominatorError(f"{label} must be positive, got {wbar!r}")
    return wbar


def estimate_arm_mean(rows: ClusterTable | Iterable[ClusterRow]) -> ArmEstimate:
    t = _table(rows, 2)
    n = len(t)
    mean, var = sample_mean_var(t.y, 1)
    s = math.sqrt(var)
    return ArmEstimate(mean, 1.0, s, n, n - 1, s / math.sqrt(n), MetricKind.MEAN, residuals=t.y - mean)


def estimate_arm_ratio(rows: ClusterTable | Iterable[ClusterRow]) -> ArmEstimate:
    """Ratio of means ybar / wbar with the delta-method residual SE."""
    t = _table(rows, 2)
    n = len(t)
    wbar = _positive_mean(t.w)
    theta = float(np.mean(t.y)) / wbar
    r = t.y - theta * t.w
    _, var = sample_mean_var(r, 1)
    s = math.sqrt(var)
    return ArmEstimate(theta, wbar, s, n, n - 1, s / (math.sqrt(n) * wbar), MetricKind.RATIO, residuals=r)


def _check_xbar(t: ClusterTable, xbar) -> np.ndarray:
    xb = np.asarray(xbar if xbar is not None else t.x.mean(axis=0), dtype=float).ravel()
    if xb.shape[0] != t.p:
        raise DomainError(f"xbar has length {xb.shape[0]} but rows carry {t.p} covariates")
    return xb


def estimate_arm_adjusted_mean(rows: ClusterTable | Iterable[ClusterRow], xbar=None) -> ArmEstimate:
    """Regression-adjusted mean: the arm's fitted line evaluated at ``xbar``.

    ``xbar`` should be the covariate mean over all units of every arm; it
    defaults to this arm's own mean, where the estimate reduces to ybar.
    The extra variance of predicting away from the arm's own covariate
    mean is not included in the SE.
    """
    t = as_cluster_table(rows)
    xb = _check_xbar(t, xbar)
    fit = _Design(t.x).fit(t.y)
    n = len(t)
    s = math.sqrt(fit.residual_ss / fit.df)
    return ArmEstimate(
        fit.predict(xb), 1.0, s, n, fit.df, s / math.sqrt(n), MetricKind.ADJUSTED_MEAN, residuals=t.y - fit.fitted
    )


def estimate_arm_adjusted_ratio(
    rows: ClusterTable | Iterable[ClusterRow],
    xbar=None,
    theta_mode: ThetaMode = "arm_adjusted",
) -> ArmEstimate:
    """Regression-adjusted ratio mu_Y / mu_W with a double-residual SE.

    Numerator and denominator are each regressed on the same covariates and
    predicted at ``xbar``. The double residual uses the adjusted ratio in
    ``"arm_adjusted"`` mode and ybar / wbar in ``"unadjusted"`` mode (the
    planning convention).
    """
    if theta_mode not in ("arm_adjusted", "unadjusted"):
        raise DomainError(f"unknown theta_mode {theta_mode!r}")
    t = as_cluster_table(rows)
    xb = _check_xbar(t, xbar)
    design = _Design(t.x)
    wbar = _positive_mean(t.w)
    fy = design.fit(t.y)
    fw = design.fit(t.w)
    mu_y = fy.predict(xb)
    mu_w = fw.predict(xb)
    if not mu_w > 0.0:
        raise DegenerateDenominatorError(f"adjusted denominator mean must be positive, got {mu_w!r}")
    estimate = mu_y / mu_w
    theta = estimate if theta_mode == "arm_adjusted" else float(np.mean(t.y)) / wbar
    r = (t.y - fy.fitted) - theta * (t.w - fw.fitted)
    n = len(t)
    s = math.sqrt(float(r @ r) / fy.df)
    return ArmEstimate(
        estimate, mu_w, s, n, fy.df, s / (math.sqrt(n) * mu_w), MetricKind.ADJUSTED_RATIO, residuals=r
    )


def estimate_arm(
    rows: ClusterTable | Iterable[ClusterRow],
    kind: MetricKind | str,
    xbar=None,
    theta_mode: ThetaMode = "arm_adjusted",
) -> ArmEstimate:
    kind = MetricKind(kind)
    if kind is MetricKind.MEAN:
        return estimate_arm_mean(rows)
    if kind is MetricKind.RATIO:
        return estimate_arm_ratio(rows)
    if kind is MetricKind.ADJUSTED_MEAN:
        return estimate_arm_adjusted_mean(rows, xbar)
    return estimate_arm_adjusted_ratio(rows, xbar, theta_mode)


def common_mean(*tables: ClusterTable) -> np.ndarray:
    """Covariate mean over all units of all given tables."""
    x = np.concatenate([t.x for t in tables], axis=0)
    return x.mean(axis=0)


def estimate_effect(
    arm_c: ArmEstimate,
    arm_t: ArmEstimate,
    alpha: float = 0.05,
    tail: NormalTail | str = NormalTail.ONE_SIDED,
) -> EffectEstimate:
    """Treatment minus control with the unpooled SE.

    The one-sided test is for an increase; its interval is
    ``[delta - z * se, inf)``.
    """
    if arm_c.metric_kind != arm_t.metric_kind:
        raise IncompatibleArmsError(
            f"cannot compare a {arm_c.metric_kind.value} arm with a {arm_t.metric_kind.value} arm"
        )
    tail = NormalTail.parse(tail)
    zcrit = tail.critical_value(alpha)
    delta = arm_t.estimate - arm_c.estimate
    se = math.hypot(arm_c.se, arm_t.se)
    if se > 0.0:
        z = delta / se
    else:
        z = 0.0 if delta == 0.0 else math.copysign(math.inf, delta)
    if tail is NormalTail.ONE_SIDED:
        p = _upper_tail(z)
        lo, hi = delta - zcrit * se, math.inf
    else:
        p = min(1.0, 2.0 * _upper_tail(abs(z)))
        lo, hi = delta - zcrit * se, delta + zcrit * se
    return EffectEstimate(delta, se, z, p, tail, lo, hi, alpha)


def _upper_tail(z: float) -> float:
    if math.isinf(z):
        return 0.0 if z > 0 else 1.0
    return normal_cdf(-z)
