import math
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from abpower.errors import DomainError, SpecError
from abpower.estimators import ArmEstimate, MetricKind
from abpower.power import (
    PowerSpec,
    SkewnessWarning,
    VarianceProfile,
    allocation_factor,
    planning_se,
    skewness_warning,
    solve,
    solve_mde,
    solve_n,
    solve_power,
)

Z95 = 1.6448536269514722
Z80 = 0.8416212335729144


def oracle_n(alpha, power, mde, sd, psi, two_sided=False):
    """Closed-form sample size using scipy's normal quantiles."""
    zc = stats.norm.ppf(1 - alpha / 2 if two_sided else 1 - alpha)
    zb = stats.norm.ppf(power)
    return max(2, math.ceil(((zc + zb) * allocation_oracle(psi) * sd / mde) ** 2))


def allocation_oracle(psi):
    return math.sqrt(1 / psi + 1 / (1 - psi))


class TestAllocation:
    def test_even_split(self):
        assert allocation_factor(0.5) == 2.0

    def test_ten_percent(self):
        assert allocation_factor(0.1) == pytest.approx(10 / 3, rel=1e-12)

    @given(st.floats(0.001, 0.999))
    def test_symmetric_and_minimal(self, psi):
        assert allocation_factor(psi) == pytest.approx(allocation_factor(1 - psi), rel=1e-12)
        assert allocation_factor(psi) >= 2.0 - 1e-12

    @pytest.mark.parametrize("psi", [0.0, 1.0, -0.2, 1.5])
    def test_domain(self, psi):
        with pytest.raises(DomainError):
            allocation_factor(psi)


class TestPlanningSe:
    def test_hand_value(self):
        assert planning_se(VarianceProfile(2.5), 10000) == pytest.approx(0.05, rel=1e-12)

    def test_effective_sd(self):
        prof = VarianceProfile(3.0, 1.5, MetricKind.RATIO)
        assert prof.effective_sd == 2.0
        assert planning_se(prof, 400) == pytest.approx(0.2)

    def test_from_arm(self):
        arm = ArmEstimate(2.0, 4.0, 8.0, 50, 49, 0.1, MetricKind.RATIO)
        prof = VarianceProfile.from_arm(arm)
        assert (prof.effective_sd, prof.source_n, prof.metric_kind) == (2.0, 50, MetricKind.RATIO)

    @pytest.mark.parametrize("args", [(-1.0,), (math.nan,), (1.0, 0.0), (1.0, -2.0)])
    def test_bad_profile(self, args):
        with pytest.raises(DomainError):
            VarianceProfile(*args)


class TestSolvers:
    def test_mde_unit_se(self):
        assert solve_mde(0.05, 0.5, 1.0) == pytest.approx(Z95, abs=1e-9)
        assert solve_mde(0.05, 0.8, 1.0) == pytest.approx(Z95 + Z80, abs=1e-9)
        assert solve_mde(0.05, 0.8, 1.0) == pytest.approx(2.4864748605243866, abs=1e-12)

    def test_mde_two_sided(self):
        assert solve_mde(0.05, 0.5, 1.0, "two") == pytest.approx(1.959963984540054, abs=1e-12)

    def test_n_hand_value(self):
        # raw = (2.4864748605 * 2 * 1 / 0.1)^2 = 2473.02
        assert solve_n(0.05, 0.8, 0.1, VarianceProfile(1.0)) == 2474

    def test_round_trip(self):
        prof = VarianceProfile(1.7)
        se = planning_se(prof, 1000)
        mde = solve_mde(0.05, 0.8, se)
        assert solve_n(0.05, 0.8, mde, prof) == 1000
        assert solve_power(0.05, mde, prof, 1000) == pytest.approx(0.8, abs=1e-12)

    def test_power_at_critical_value(self):
        prof = VarianceProfile(1.0)
        se = planning_se(prof, 400)
        assert solve_power(0.05, Z95 * se, prof, 400) == pytest.approx(0.5, abs=1e-12)

    def test_zero_variance(self):
        assert solve_power(0.05, 0.1, VarianceProfile(0.0), 10) == 1.0
        assert solve_n(0.05, 0.8, 0.1, VarianceProfile(0.0)) == 2

    @settings(max_examples=60, deadline=None)
    @given(
        st.sampled_from([0.01, 0.05, 0.1]),
        st.floats(0.55, 0.95),
        st.floats(0.05, 1.0),
        st.floats(0.5, 3.0),
        st.floats(0.1, 0.9),
        st.booleans(),
    )
    def test_n_minimal_against_scipy(self, alpha, power, mde, sd, psi, two):
        tail = "two" if two else "one"
        n = solve_n(alpha, power, mde, VarianceProfile(sd), psi, tail)
        expected = oracle_n(alpha, power, mde, sd, psi, two)
        # scipy and the package differ only in the last few ulps of the CDF
        assert abs(n - expected) <= 1
        prof = VarianceProfile(sd)
        assert solve_power(alpha, mde, prof, n, psi, tail) >= power - 1e-12
        if n > 2:
            assert solve_power(alpha, mde, prof, n - 1, psi, tail) < power

    @given(st.floats(0.01, 2.0), st.integers(2, 10**6))
    def test_power_monotone_in_n(self, mde, n):
        prof = VarianceProfile(1.0)
        assert solve_power(0.05, mde, prof, n + 1) >= solve_power(0.05, mde, prof, n)

    def test_bad_inputs(self):
        with pytest.raises(DomainError):
            solve_mde(0.05, 1.0, 1.0)
        with pytest.raises(DomainError):
            solve_n(0.05, 0.8, 0.0, VarianceProfile(1.0))
        with pytest.raises(DomainError):
            planning_se(VarianceProfile(1.0), 1)


class TestSolve:
    def test_each_target(self):
        prof = VarianceProfile(1.0)
        n_sol = solve(PowerSpec(power=0.8, mde=0.1), prof)
        assert (n_sol.target, n_sol.n) == ("n", 2474)
        mde_sol = solve(PowerSpec(power=0.8, n=2474), prof)
        assert mde_sol.target == "mde"
        assert mde_sol.mde == pytest.approx(2.4864748605243866 * 2 / math.sqrt(2474), rel=1e-12)
        p_sol = solve(PowerSpec(mde=mde_sol.mde, n=2474), prof)
        assert p_sol.target == "power"
        assert p_sol.power == pytest.approx(0.8, abs=1e-12)
        assert p_sol.to_dict()["tail"] == "one_sided"

    @pytest.mark.parametrize(
        "kwargs", [dict(power=0.8), dict(), dict(power=0.8, mde=0.1, n=100)]
    )
    def test_wrong_number_of_unknowns(self, kwargs):
        with pytest.raises(SpecError):
            solve(PowerSpec(**kwargs), VarianceProfile(1.0))

    @pytest.mark.parametrize(
        "kwargs", [dict(alpha=0.0), dict(psi=1.0), dict(power=1.2), dict(mde=-0.1), dict(n=1), dict(n=2.5)]
    )
    def test_invalid_spec(self, kwargs):
        with pytest.raises(DomainError):
            PowerSpec(**kwargs)

    def test_tail_parsing(self):
        assert PowerSpec(tail="2").tail.value == "two_sided"
        with pytest.raises(DomainError):
            PowerSpec(tail="three")


class TestSkewnessWarning:
    def test_warns_for_uneven_skewed(self):
        with pytest.warns(SkewnessWarning):
            assert skewness_warning(2.5, 0.1) is not None

    @pytest.mark.parametrize("skew, psi", [(2.5, 0.5), (2.5, 0.4), (0.5, 0.1), (-1.0, 0.9)])
    def test_silent(self, skew, psi):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert skewness_warning(skew, psi) is None

    def test_negative_skew_and_no_emit(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert "skewness" in skewness_warning(-3.0, 0.8, emit=False)
