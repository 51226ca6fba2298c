"""Monte Carlo harness for checking standard errors and power formulas.

Synthetic experiments are drawn from a latent Gaussian model. Each unit has
two standard normal factors, ``g_y`` (level of its event values) and
``g_w`` (its cluster size, or the level of its denominator values), with
correlation ``latent_yw_corr``. Covariates are built as Gaussian copula
components: covariate ``k`` has correlation ``rho_y[k]`` with ``g_y`` and
``rho_w[k]`` with ``g_w``. For normal event values with
``within_unit_corr=1`` and single-event clusters, ``rho_y`` is exactly the
Pearson correlation between covariate and outcome.

Every replication draws from its own Philox stream keyed by
``(seed, replication)``, so runs are reproducible, replications can be split
across workers without overlap, and two estimators run under the same
config see identical datasets.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Literal

import numpy as np
from scipy import special, stats

from .aggregation import ClusterTable, EventRecord, EventTable, aggregate_table
from .core_stats import NormalTail, normal_quantile
from .errors import ConfigError, DataError, HarnessError
from .estimators import MetricKind, common_mean, estimate_arm, estimate_effect
from .power import PowerSpec, VarianceProfile, planning_se, solve_mde, solve_power

__all__ = [
    "GeneratorConfig",
    "CalibrationReport",
    "PitfallReport",
    "generate",
    "generate_table",
    "true_effect",
    "population_profile",
    "effect_for_power",
    "calibrate_se",
    "calibrate_many",
    "empirical_power",
    "pitfall_weighted_regression",
    "calibration_bands",
]

MAX_FAILURE_RATE = 0.01
_POPULATION_STREAM = 2**63 - 1


@dataclass(frozen=True)
class GeneratorConfig:
    n_units: int = 200
    cluster_law: Literal["fixed", "poisson"] = "fixed"
    cluster_param: float = 1.0
    y_law: Literal["normal", "lognormal"] = "normal"
    y_mu: float = 0.0
    y_sigma: float = 1.0
    w_role: Literal["count", "event_value"] = "count"
    w_sigma: float = 0.5
    covariates: tuple[tuple[float, float], ...] = ()
    effect: float = 0.0
    psi: float = 0.5
    within_unit_corr: float = 0.5
    latent_yw_corr: float = 0.0
    size_effect: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple((float(a), float(b)) for a, b in self.covariates))
        if int(self.n_units) != self.n_units or self.n_units < 4:
            raise ConfigError(f"n_units: need an integer >= 4, got {self.n_units!r}")
        if self.cluster_law not in ("fixed", "poisson"):
            raise ConfigError(f"cluster_law: expected fixed|poisson, got {self.cluster_law!r}")
        if self.cluster_law == "fixed" and (int(self.cluster_param) != self.cluster_param or self.cluster_param < 1):
            raise ConfigError(f"cluster_param: fixed cluster size must be an integer >= 1, got {self.cluster_param!r}")
        if self.cluster_law == "poisson" and not self.cluster_param >= 0:
            raise ConfigError(f"cluster_param: poisson rate must be >= 0, got {self.cluster_param!r}")
        if self.y_law not in ("normal", "lognormal"):
            raise ConfigError(f"y_law: expected normal|lognormal, got {self.y_law!r}")
        if self.w_role not in ("count", "event_value"):
            raise ConfigError(f"w_role: expected count|event_value, got {self.w_role!r}")
        if not self.y_sigma >= 0:
            raise ConfigError(f"y_sigma: must be >= 0, got {self.y_sigma!r}")
        if not self.w_sigma >= 0:
            raise ConfigError(f"w_sigma: must be >= 0, got {self.w_sigma!r}")
        if not 0.0 < self.psi < 1.0:
            raise ConfigError(f"psi: must lie in (0, 1), got {self.psi!r}")
        if not 0.0 <= self.within_unit_corr <= 1.0:
            raise ConfigError(f"within_unit_corr: must lie in [0, 1], got {self.within_unit_corr!r}")
        if not -1.0 <= self.latent_yw_corr <= 1.0:
            raise ConfigError(f"latent_yw_corr: must lie in [-1, 1], got {self.latent_yw_corr!r}")
        for k, (ry, rw) in enumerate(self.covariates):
            for name, v in (("rho_y", ry), ("rho_w", rw)):
                if not -1.0 <= v <= 1.0:
                    raise ConfigError(f"covariates[{k}].{name}: correlation must lie in [-1, 1], got {v!r}")
        self.loadings()

    @property
    def p(self) -> int:
        return len(self.covariates)

    @property
    def mean_cluster_size(self) -> float:
        return float(self.cluster_param) + (1.0 if self.cluster_law == "poisson" else 0.0)

    @property
    def n_treated(self) -> int:
        return min(self.n_units - 2, max(2, round(self.psi * self.n_units)))

    def loadings(self) -> np.ndarray:
        """Rows ``(a, b, c)``: covariate = a*g_y + b*g_w + c*noise.

        Raises ConfigError when the implied latent correlation matrix is not
        positive semidefinite.
        """
        r = self.latent_yw_corr
        gram = np.array([[1.0, r], [r, 1.0]])
        out = np.zeros((self.p, 3))
        pinv = np.linalg.pinv(gram)
        for k, (ry, rw) in enumerate(self.covariates):
            target = np.array([ry, rw])
            ab = pinv @ target
            if not np.allclose(gram @ ab, target, atol=1e-9):
                raise ConfigError(
                    f"covariates[{k}]: targets ({ry}, {rw}) are inconsistent with latent_yw_corr={r}"
                )
            c2 = 1.0 - float(target @ ab)
            if c2 < -1e-12:
                raise ConfigError(
                    f"covariates[{k}]: targets ({ry}, {rw}) with latent_yw_corr={r} give a correlation "
                    "matrix that is not positive semidefinite"
                )
            out[k] = (ab[0], ab[1], math.sqrt(max(c2, 0.0)))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown generator field(s): {', '.join(unknown)}")
        kw = {}
        for name, value in d.items():
            if name == "covariates":
                try:
                    value = tuple((float(a), float(b)) for a, b in value)
                except (TypeError, ValueError):
                    raise ConfigError("covariates: expected a list of [rho_y, rho_w] pairs") from None
            elif name in ("cluster_law", "y_law", "w_role"):
                value = str(value)
            elif name in ("n_units", "seed"):
                try:
                    value = int(value)
                except (TypeError, ValueError):
                    raise ConfigError(f"{name}: expected an integer, got {value!r}") from None
            else:
                try:
                    value = float(value)
                except (TypeError, ValueError):
                    raise ConfigError(f"{name}: expected a number, got {value!r}") from None
            kw[name] = value
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"] = [list(c) for c in self.covariates]
        return d


def _stream(seed: int, replication: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(replication),))
    return np.random.Generator(np.random.Philox(ss))


def _draw(config: GeneratorConfig, rng: np.random.Generator, n_units: int | None = None,
          treat: bool = True) -> EventTable:
    n = config.n_units if n_units is None else n_units
    r = config.latent_yw_corr
    z = rng.standard_normal((n, 2))
    g_y = z[:, 0]
    g_w = r * z[:, 0] + math.sqrt(max(1.0 - r * r, 0.0)) * z[:, 1]

    if config.cluster_law == "fixed":
        sizes = np.full(n, int(config.cluster_param), dtype=np.int64)
    else:
        u = special.ndtr(g_w)
        sizes = 1 + stats.poisson.ppf(u, config.cluster_param).astype(np.int64)

    unit = np.repeat(np.arange(n), sizes)
    m = unit.shape[0]
    h = config.within_unit_corr
    latent = math.sqrt(h) * g_y[unit] + math.sqrt(1.0 - h) * rng.standard_normal(m)
    loc = config.y_mu + config.size_effect * np.log(sizes)
    value = loc[unit] + config.y_sigma * latent
    y = np.exp(value) if config.y_law == "lognormal" else value

    if config.w_role == "count":
        w = np.ones(m)
    else:
        w_latent = math.sqrt(h) * g_w[unit] + math.sqrt(1.0 - h) * rng.standard_normal(m)
        w = np.exp(config.w_sigma * w_latent)

    if config.p:
        load = config.loadings()
        noise = rng.standard_normal((n, config.p))
        x_unit = g_y[:, None] * load[:, 0] + g_w[:, None] * load[:, 1] + noise * load[:, 2]
        x = x_unit[unit]
    else:
        x = np.empty((m, 0))

    treated = np.zeros(n, dtype=bool)
    if treat:
        treated[rng.permutation(n)[: config.n_treated]] = True
        y = y + config.effect * treated[unit]
    arms = np.where(treated, "T", "C").astype(object)
    return EventTable(unit_ids=unit, y=y, w=w, x=x, arms=arms[unit])


def generate_table(config: GeneratorConfig, replication: int = 0) -> EventTable:
    """Column-wise events for one replication; unit ids are integers 0..n-1."""
    return _draw(config, _stream(config.seed, replication))


def generate(config: GeneratorConfig, replication: int = 0) -> list[EventRecord]:
    """Event records for one replication; deterministic in ``(config.seed, replication)``."""
    table = generate_table(config, replication)
    width = len(str(config.n_units - 1))
    ids = np.array([f"u{i:0{width}d}" for i in range(config.n_units)], dtype=object)
    table.unit_ids = ids[table.unit_ids]
    return table.records()


def _aggregate(config: GeneratorConfig, events: EventTable) -> ClusterTable:
    return aggregate_table(events, "count" if config.w_role == "count" else "sum", "mean")


def true_effect(config: GeneratorConfig, kind: MetricKind | str) -> float:
    """Population difference between arms targeted by estimator ``kind``.

    Every event in a treated unit is shifted by ``config.effect``, so a unit
    total moves by ``effect * n_events``.
    """
    kind = MetricKind(kind)
    if not kind.is_ratio:
        return config.effect * config.mean_cluster_size
    if config.w_role == "count":
        return config.effect
    return config.effect / math.exp(0.5 * config.w_sigma**2)


def population_profile(config: GeneratorConfig, kind: MetricKind | str, n_pop: int = 400_000) -> VarianceProfile:
    """Effective SD of the untreated population, estimated from one large draw."""
    kind = MetricKind(kind)
    big = replace(config, n_units=n_pop)
    table = _aggregate(big, _draw(big, _stream(config.seed, _POPULATION_STREAM), treat=False))
    arm = estimate_arm(table, kind, theta_mode="unadjusted")
    return VarianceProfile(arm.residual_sd, arm.denom_mean, kind, n_pop)


def effect_for_power(
    config: GeneratorConfig,
    kind: MetricKind | str,
    power: float,
    alpha: float = 0.05,
    tail: NormalTail | str = NormalTail.ONE_SIDED,
) -> float:
    """Per-event shift that gives ``power`` at the config's sample size."""
    kind = MetricKind(kind)
    profile = population_profile(config, kind)
    mde = solve_mde(alpha, power, planning_se(profile, config.n_units, config.psi), tail)
    return mde / (true_effect(replace(config, effect=1.0), kind))


@dataclass(frozen=True)
class CalibrationReport:
    estimator_kind: str
    replications: int
    failures: int
    true_effect: float
    mean_estimate: float
    mean_estimated_se: float
    empirical_sd: float
    calibration_ratio: float
    coverage: float
    rejection_rate_null: float
    alpha: float = 0.05
    level: float = 0.95
    empirical_power: float | None = None
    predicted_power: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_kv(self) -> str:
        return _kv(self.to_dict())


@dataclass(frozen=True)
class PitfallReport:
    replications: int
    failures: int
    true_effect: float
    empirical_sd: float
    delta_mean_se: float
    delta_ratio: float
    delta_coverage: float
    naive_mean_se: float
    naive_ratio: float
    naive_coverage: float
    wls_mean_se: float
    wls_ratio: float
    naive_direction: str = field(default="")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_kv(self) -> str:
        return _kv(self.to_dict())


def _kv(d: dict) -> str:
    return "\n".join(f"{k}={_fmt(v)}" for k, v in d.items()) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _ratio(mean_se: float, sd: float) -> float:
    if sd == 0.0:
        return 1.0 if mean_se == 0.0 else math.inf
    return mean_se / sd


def _split_arms(table: ClusterTable) -> tuple[ClusterTable, ClusterTable]:
    treated = table.arms == "T"
    return table.subset(~treated), table.subset(treated)


def _effect_draws(config: GeneratorConfig, kinds: Sequence[MetricKind], replications: int,
                  alpha: float, tail: NormalTail) -> tuple[dict, int]:
    est = {k: np.full(replications, np.nan) for k in kinds}
    ses = {k: np.full(replications, np.nan) for k in kinds}
    failures = 0
    for rep in range(replications):
        table = _aggregate(config, _draw(config, _stream(config.seed, rep)))
        c, t = _split_arms(table)
        xbar = common_mean(c, t)
        try:
            for k in kinds:
                eff = estimate_effect(estimate_arm(c, k, xbar), estimate_arm(t, k, xbar), alpha, tail)
                est[k][rep] = eff.delta
                ses[k][rep] = eff.se
        except DataError:
            failures += 1
            for k in kinds:
                est[k][rep] = ses[k][rep] = np.nan
    if failures > MAX_FAILURE_RATE * replications:
        raise HarnessError(f"{failures} of {replications} replications failed (limit {MAX_FAILURE_RATE:.0%})")
    return {k: (est[k], ses[k]) for k in kinds}, failures


def _summarize(kind: MetricKind, draws: tuple[np.ndarray, np.ndarray], failures: int, truth: float,
               alpha: float, level: float, tail: NormalTail) -> CalibrationReport:
    delta, se = draws
    ok = ~np.isnan(delta)
    delta, se = delta[ok], se[ok]
    mean_se = float(np.mean(se))
    sd = float(np.std(delta, ddof=1))
    centered = delta - truth
    z_cov = normal_quantile(0.5 + level / 2.0)
    coverage = float(np.mean(np.abs(centered) <= z_cov * se))
    zcrit = tail.critical_value(alpha)
    if tail is NormalTail.ONE_SIDED:
        null_rej = centered > zcrit * se
    else:
        null_rej = np.abs(centered) > zcrit * se
    return CalibrationReport(
        estimator_kind=kind.value,
        replications=int(ok.sum()) + failures,
        failures=failures,
        true_effect=truth,
        mean_estimate=float(np.mean(delta)),
        mean_estimated_se=mean_se,
        empirical_sd=sd,
        calibration_ratio=_ratio(mean_se, sd),
        coverage=coverage,
        rejection_rate_null=float(np.mean(null_rej)),
        alpha=alpha,
        level=level,
    )


def calibrate_many(
    config: GeneratorConfig,
    kinds: Sequence[MetricKind | str],
    replications: int = 10_000,
    alpha: float = 0.05,
    level: float = 0.95,
    tail: NormalTail | str = NormalTail.ONE_SIDED,
) -> dict[str, CalibrationReport]:
    """Calibrate several estimators on the same simulated datasets."""
    if replications < 2:
        raise ConfigError(f"replications: need at least 2, got {replications}")
    kinds = [MetricKind(k) for k in kinds]
    tail = NormalTail.parse(tail)
    draws, failures = _effect_draws(config, kinds, replications, alpha, tail)
    return {
        k.value: _summarize(k, draws[k], failures, true_effect(config, k), alpha, level, tail) for k in kinds
    }


def calibrate_se(
    config: GeneratorConfig,
    estimator_kind: MetricKind | str,
    replications: int = 10_000,
    alpha: float = 0.05,
    level: float = 0.95,
    tail: NormalTail | str = NormalTail.ONE_SIDED,
) -> CalibrationReport:
    """Compare the mean estimated SE of the effect with its Monte Carlo SD.

    ``coverage`` is for two-sided intervals at ``level``;
    ``rejection_rate_null`` tests the true effect at ``alpha`` with ``tail``.
    """
    kind = MetricKind(estimator_kind)
    return calibrate_many(config, [kind], replications, alpha, level, tail)[kind.value]


def empirical_power(
    config: GeneratorConfig,
    spec: PowerSpec,
    replications: int = 10_000,
    estimator_kind: MetricKind | str = MetricKind.RATIO,
) -> CalibrationReport:
    """Rejection rate of ``H0: delta = 0`` next to the formula's prediction.

    The prediction plugs the population effective SD into the power formula
    with the config's total sample size and split.
    """
    kind = MetricKind(estimator_kind)
    if spec.n is not None and spec.n != config.n_units:
        raise ConfigError(f"spec n={spec.n} disagrees with generator n_units={config.n_units}")
    if spec.psi != config.psi:
        raise ConfigError(f"spec psi={spec.psi} disagrees with generator psi={config.psi}")
    draws, failures = _effect_draws(config, [kind], replications, spec.alpha, spec.tail)
    truth = true_effect(config, kind)
    report = _summarize(kind, draws[kind], failures, truth, spec.alpha, 0.95, spec.tail)
    delta, se = (a[~np.isnan(a)] for a in draws[kind])
    zcrit = spec.tail.critical_value(spec.alpha)
    stat = np.divide(delta, se, out=np.zeros_like(delta), where=se > 0)
    stat[(se == 0) & (delta > 0)] = np.inf
    rejected = stat > zcrit if spec.tail is NormalTail.ONE_SIDED else np.abs(stat) > zcrit
    predicted = None
    if truth > 0:
        predicted = solve_power(spec.alpha, truth, population_profile(config, kind), config.n_units,
                                config.psi, spec.tail)
    return replace(report, empirical_power=float(np.mean(rejected)), predicted_power=predicted)


def pitfall_weighted_regression(config: GeneratorConfig, replications: int = 10_000) -> PitfallReport:
    """Delta-method SE against fixed-weight weighted-average SEs for a ratio effect.

    The naive SE treats each arm's ratio as a weighted average of cluster
    ratios ``V = Y / W`` with fixed weights and a common variance:
    ``sum(W**2) / sum(W)**2 * var(V)``. The ``wls`` variant is what weighted
    least squares software reports for the treatment coefficient, assuming
    ``var(V) ∝ 1 / W``.
    """
    if replications < 2:
        raise ConfigError(f"replications: need at least 2, got {replications}")
    delta = np.full(replications, np.nan)
    se_delta = np.full(replications, np.nan)
    se_naive = np.full(replications, np.nan)
    se_wls = np.full(replications, np.nan)
    failures = 0
    for rep in range(replications):
        table = _aggregate(config, _draw(config, _stream(config.seed, rep)))
        c, t = _split_arms(table)
        try:
            eff = estimate_effect(estimate_arm(c, MetricKind.RATIO), estimate_arm(t, MetricKind.RATIO))
        except DataError:
            failures += 1
            continue
        delta[rep], se_delta[rep] = eff.delta, eff.se
        se_naive[rep] = math.hypot(_naive_arm_se(c), _naive_arm_se(t))
        se_wls[rep] = _wls_effect_se(c, t)
    if failures > MAX_FAILURE_RATE * replications:
        raise HarnessError(f"{failures} of {replications} replications failed (limit {MAX_FAILURE_RATE:.0%})")
    ok = ~np.isnan(delta)
    delta, se_delta, se_naive, se_wls = delta[ok], se_delta[ok], se_naive[ok], se_wls[ok]
    truth = true_effect(config, MetricKind.RATIO)
    sd = float(np.std(delta, ddof=1))
    z = normal_quantile(0.975)
    naive_ratio = _ratio(float(np.mean(se_naive)), sd)
    return PitfallReport(
        replications=replications,
        failures=failures,
        true_effect=truth,
        empirical_sd=sd,
        delta_mean_se=float(np.mean(se_delta)),
        delta_ratio=_ratio(float(np.mean(se_delta)), sd),
        delta_coverage=float(np.mean(np.abs(delta - truth) <= z * se_delta)),
        naive_mean_se=float(np.mean(se_naive)),
        naive_ratio=naive_ratio,
        naive_coverage=float(np.mean(np.abs(delta - truth) <= z * se_naive)),
        wls_mean_se=float(np.mean(se_wls)),
        wls_ratio=_ratio(float(np.mean(se_wls)), sd),
        naive_direction="overstates" if naive_ratio > 1.0 else "understates" if naive_ratio < 1.0 else "exact",
    )


def _naive_arm_se(arm: ClusterTable) -> float:
    v = arm.y / arm.w
    return math.sqrt(float(np.sum(arm.w**2)) / float(np.sum(arm.w)) ** 2 * float(np.var(v, ddof=1)))


def _wls_effect_se(c: ClusterTable, t: ClusterTable) -> float:
    sigma2 = 0.0
    for arm in (c, t):
        v = arm.y / arm.w
        vbar = float(arm.w @ v) / float(np.sum(arm.w))
        sigma2 += float(arm.w @ (v - vbar) ** 2)
    sigma2 /= len(c) + len(t) - 2
    return math.sqrt(sigma2 * (1.0 / float(np.sum(c.w)) + 1.0 / float(np.sum(t.w))))


def calibration_bands(replications: int) -> dict[str, tuple[float, float]]:
    """Acceptance bands for a calibration run of the given size.

    At 10,000 replications the SE ratio band is [0.97, 1.03] and coverage
    of 95% intervals [0.94, 0.96]; both widen as 1/sqrt(replications) for
    smaller runs.
    """
    half_ratio = max(0.03, 3.0 / math.sqrt(replications))
    half_cov = max(0.01, 1.0 / math.sqrt(replications))
    return {
        "calibration_ratio": (1.0 - half_ratio, 1.0 + half_ratio),
        "coverage": (0.95 - half_cov, 0.95 + half_cov),
    }
