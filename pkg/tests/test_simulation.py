import math

import numpy as np
import pytest

from abpower.errors import ConfigError
from abpower.estimators import MetricKind
from abpower.power import PowerSpec
from abpower.simulation import (
    GeneratorConfig,
    calibrate_many,
    calibrate_se,
    calibration_bands,
    effect_for_power,
    empirical_power,
    generate,
    generate_table,
    pitfall_weighted_regression,
    population_profile,
    true_effect,
)


class TestGeneratorConfig:
    def test_defaults_valid(self):
        cfg = GeneratorConfig()
        assert cfg.n_treated == 100
        assert cfg.mean_cluster_size == 1.0

    def test_poisson_mean_size(self):
        assert GeneratorConfig(cluster_law="poisson", cluster_param=3).mean_cluster_size == 4.0

    @pytest.mark.parametrize(
        "kwargs, field",
        [
            (dict(covariates=((1.5, 0.0),)), "rho_y"),
            (dict(covariates=((0.9, -0.9),), latent_yw_corr=0.9), "covariates[0]"),
            (dict(n_units=2), "n_units"),
            (dict(psi=1.0), "psi"),
            (dict(cluster_law="geometric"), "cluster_law"),
            (dict(cluster_law="fixed", cluster_param=2.5), "cluster_param"),
            (dict(within_unit_corr=1.2), "within_unit_corr"),
        ],
    )
    def test_invalid(self, kwargs, field):
        with pytest.raises(ConfigError, match=field.replace("[", r"\[").replace("]", r"\]")):
            GeneratorConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = GeneratorConfig(covariates=((0.8, 0.5),), latent_yw_corr=0.5, y_law="lognormal")
        assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="bogus"):
            GeneratorConfig.from_dict({"bogus": 1})

    def test_loadings_reproduce_targets(self):
        cfg = GeneratorConfig(covariates=((0.8, 0.8), (0.3, -0.2)), latent_yw_corr=0.5)
        r = cfg.latent_yw_corr
        for (ry, rw), (a, b, c) in zip(cfg.covariates, cfg.loadings()):
            assert a + b * r == pytest.approx(ry)
            assert a * r + b == pytest.approx(rw)
            assert a * a + b * b + 2 * a * b * r + c * c == pytest.approx(1.0)


class TestGenerate:
    def test_deterministic(self):
        cfg = GeneratorConfig(cluster_law="poisson", cluster_param=2, seed=11)
        assert generate(cfg, 3) == generate(cfg, 3)
        assert generate(cfg, 3) != generate(cfg, 4)

    def test_fixed_sizes_and_split(self):
        cfg = GeneratorConfig(n_units=50, cluster_param=3, psi=0.2)
        events = generate(cfg)
        assert len(events) == 150
        units = {e.unit_id: e.arm for e in events}
        assert len(units) == 50
        assert sum(a == "T" for a in units.values()) == 10

    def test_covariate_correlation(self):
        cfg = GeneratorConfig(n_units=100_000, within_unit_corr=1.0, covariates=((0.9, 0.0),), seed=5)
        t = generate_table(cfg)
        assert np.corrcoef(t.y, t.x[:, 0])[0, 1] == pytest.approx(0.9, abs=0.01)

    def test_latent_size_correlation(self):
        cfg = GeneratorConfig(n_units=50_000, cluster_law="poisson", cluster_param=3,
                              latent_yw_corr=0.6, within_unit_corr=1.0, seed=2)
        t = generate_table(cfg)
        sizes = np.bincount(t.unit_ids)
        y_unit = t.y[np.searchsorted(t.unit_ids, np.arange(cfg.n_units))]
        assert np.corrcoef(sizes, y_unit)[0, 1] > 0.4

    def test_effect_added_to_treated_events(self):
        base = generate_table(GeneratorConfig(n_units=20, cluster_param=2, seed=1))
        shifted = generate_table(GeneratorConfig(n_units=20, cluster_param=2, seed=1, effect=0.5))
        np.testing.assert_allclose(shifted.y - base.y, 0.5 * (base.arms == "T"))


class TestTrueEffect:
    def test_kinds(self):
        cfg = GeneratorConfig(cluster_law="poisson", cluster_param=3, effect=0.2)
        assert true_effect(cfg, "mean") == pytest.approx(0.8)
        assert true_effect(cfg, "ratio") == pytest.approx(0.2)
        ev = GeneratorConfig(w_role="event_value", w_sigma=0.5, effect=0.2)
        assert true_effect(ev, "ratio") == pytest.approx(0.2 / math.exp(0.125))

    def test_effect_for_power_inverts(self):
        cfg = GeneratorConfig(n_units=400, y_law="lognormal", y_sigma=0.5)
        d = effect_for_power(cfg, "ratio", 0.8, 0.05, "one")
        prof = population_profile(cfg, "ratio")
        from abpower.power import solve_power
        assert solve_power(0.05, d, prof, 400) == pytest.approx(0.8, abs=1e-9)


class TestCalibration:
    def test_degenerate_ratio(self):
        cfg = GeneratorConfig(y_sigma=0.0, y_mu=2.0, cluster_law="poisson", cluster_param=2)
        rep = calibrate_se(cfg, "ratio", replications=20)
        assert rep.empirical_sd == 0.0
        assert rep.calibration_ratio == 1.0

    def test_mean_small_run(self):
        cfg = GeneratorConfig(n_units=100, cluster_law="poisson", cluster_param=2, seed=4)
        rep = calibrate_se(cfg, "mean", replications=400)
        lo, hi = calibration_bands(400)["calibration_ratio"]
        assert lo <= rep.calibration_ratio <= hi
        assert rep.failures == 0
        assert "calibration_ratio=" in rep.to_kv()

    def test_many_share_datasets(self):
        cfg = GeneratorConfig(n_units=60, covariates=((0.7, 0.0),), seed=9)
        both = calibrate_many(cfg, ["mean", "adjusted_mean"], replications=50)
        single = calibrate_se(cfg, "adjusted_mean", replications=50)
        assert both["adjusted_mean"] == single
        assert both["adjusted_mean"].empirical_sd < both["mean"].empirical_sd

    def test_bands(self):
        assert calibration_bands(10_000) == {"calibration_ratio": (0.97, 1.03), "coverage": (0.94, 0.96)}
        lo, hi = calibration_bands(2500)["calibration_ratio"]
        assert (lo, hi) == pytest.approx((0.94, 1.06))


class TestEmpiricalPower:
    def test_saturation(self):
        cfg = GeneratorConfig(n_units=200, effect=2.0, seed=3)
        rep = empirical_power(cfg, PowerSpec(alpha=0.05, mde=2.0, n=200), replications=200, estimator_kind="mean")
        assert rep.empirical_power >= 0.999
        assert rep.predicted_power == pytest.approx(1.0, abs=1e-6)

    def test_null_rate(self):
        cfg = GeneratorConfig(n_units=100, seed=8)
        rep = empirical_power(cfg, PowerSpec(alpha=0.05, mde=1.0, n=100), replications=2000, estimator_kind="mean")
        assert rep.predicted_power is None
        assert abs(rep.empirical_power - 0.05) <= 4 * math.sqrt(0.05 * 0.95 / 2000)

    def test_mismatched_spec(self):
        with pytest.raises(ConfigError):
            empirical_power(GeneratorConfig(n_units=100), PowerSpec(mde=1.0, n=50), replications=10)


class TestPitfall:
    def test_equal_weights_agree(self):
        cfg = GeneratorConfig(n_units=80, cluster_param=3, y_law="lognormal", y_sigma=0.5, seed=6)
        rep = pitfall_weighted_regression(cfg, replications=100)
        assert rep.naive_mean_se == pytest.approx(rep.delta_mean_se, rel=1e-10)
        assert rep.naive_direction in ("overstates", "understates", "exact")
        assert "naive_ratio=" in rep.to_kv()
