import json
import math

import numpy as np
import pytest

from citypanel.did import cs_att
from citypanel.errors import ConfigError
from citypanel.panel import FULL_YEAR_GRID
from citypanel.simulate import (
    SimulationConfig,
    brute_force_att,
    simulate_panel,
)

from conftest import make_panel, make_schedule


class TestConfig:
    def test_defaults_match_documented_shape(self):
        cfg = SimulationConfig()
        assert cfg.n_cities == 200
        assert cfg.n_treated == 60
        assert cfg.cohort_years == (1300, 1400, 1500)
        assert cfg.staggered
        cfg.validate()

    def test_json_round_trip(self, tmp_path):
        cfg = SimulationConfig(n_cities=50, n_treated=10, tau=-0.5,
                               cohort_years=(1200, 1400), seed=7)
        path = tmp_path / "sim.json"
        path.write_text(json.dumps(cfg.__dict__))
        again = SimulationConfig.from_json(path)
        assert again == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "sim.json"
        path.write_text(json.dumps({"n_cities": 30, "bananas": 1}))
        with pytest.raises(ConfigError):
            SimulationConfig.from_json(path)

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            SimulationConfig(n_cities=2).validate()
        with pytest.raises(ConfigError):
            SimulationConfig(n_treated=0).validate()
        with pytest.raises(ConfigError):
            SimulationConfig(n_treated=300).validate()
        with pytest.raises(ConfigError):
            SimulationConfig(sigma=-1.0).validate()
        with pytest.raises(ConfigError):
            SimulationConfig(cohort_years=(1250,)).validate()


class TestSimulatePanel:
    def test_shapes_and_grid(self):
        panel, sched, truth = simulate_panel(n_cities=20, n_treated=6, seed=0)
        assert panel.n_cities == 20
        assert panel.year_grid == FULL_YEAR_GRID
        assert truth.onset.shape == (20, 11)
        assert sched.cohort.shape == (20,)
        assert int(np.isfinite(sched.cohort).sum()) == 6

    def test_seed_determinism(self):
        a = simulate_panel(n_cities=15, n_treated=5, seed=42)
        b = simulate_panel(n_cities=15, n_treated=5, seed=42)
        np.testing.assert_array_equal(a[0].population, b[0].population)
        np.testing.assert_array_equal(a[1].cohort, b[1].cohort)
        np.testing.assert_array_equal(a[2].log_outcome, b[2].log_outcome)

    def test_seeds_differ(self):
        a = simulate_panel(n_cities=15, n_treated=5, seed=1)
        b = simulate_panel(n_cities=15, n_treated=5, seed=2)
        assert not np.array_equal(a[0].population, b[0].population)

    def test_log_outcome_round_trip(self):
        panel, _, truth = simulate_panel(n_cities=12, n_treated=4, seed=3)
        np.testing.assert_allclose(np.log1p(panel.population),
                                   truth.log_outcome, atol=1e-10)

    def test_staggered_cohorts_rotate(self):
        _, sched, _ = simulate_panel(n_cities=30, n_treated=9, seed=4)
        finite = sched.cohort[np.isfinite(sched.cohort)]
        assert sorted(set(finite)) == [1300.0, 1400.0, 1500.0]
        # round-robin: equal counts
        assert [int((finite == g).sum()) for g in (1300, 1400, 1500)] == [3, 3, 3]

    def test_common_adoption(self):
        _, sched, _ = simulate_panel(n_cities=20, n_treated=6,
                                     staggered=False, seed=5)
        finite = sched.cohort[np.isfinite(sched.cohort)]
        assert set(finite) == {1300.0}

    def test_selection_on_covariate(self):
        _, sched, truth = simulate_panel(n_cities=50, n_treated=10,
                                         select_x=5.0, seed=6)
        treated = np.isfinite(sched.cohort)
        assert truth.x[treated].mean() > truth.x[~treated].mean() + 0.5

    def test_selection_on_loadings(self):
        _, sched, truth = simulate_panel(n_cities=50, n_treated=10,
                                         n_factors=2, select_loadings=5.0,
                                         seed=7)
        treated = np.isfinite(sched.cohort)
        lam1 = truth.loadings[:, 0]
        assert lam1[treated].mean() > lam1[~treated].mean() + 0.3

    def test_truth_rows_aligned_with_panel(self):
        panel, sched, truth = simulate_panel(n_cities=10, n_treated=3, seed=8)
        np.testing.assert_allclose(np.log1p(panel.population),
                                   truth.log_outcome, atol=1e-10)
        np.testing.assert_array_equal(sched.cohort, truth.cohort)
        assert sched.city_ids == panel.city_ids

    def test_trend_gap_creates_pretrend(self):
        _, _, truth = simulate_panel(n_cities=10, n_treated=3, sigma=0.0,
                                     trend_gap=0.1, seed=9)
        treated = np.isfinite(truth.cohort)
        gaps = truth.log_outcome[treated].mean(axis=0) - \
            truth.log_outcome[~treated].mean(axis=0)
        pre = gaps[:4]  # before the earliest cohort
        assert np.all(np.diff(pre) > 0.05)

    def test_percent_effect(self):
        _, _, truth = simulate_panel(n_cities=10, n_treated=3, tau=0.25,
                                     seed=10)
        assert truth.percent_effect == pytest.approx(math.expm1(0.25),
                                                     abs=1e-12)


class TestBruteForceAtt:
    def test_hand_two_by_two(self, hand_panel, hand_schedule):
        cells = brute_force_att(hand_panel, hand_schedule)
        assert cells[(1000, 1000)] == pytest.approx(2.0, abs=1e-12)
        assert cells[(1000, 800)] == pytest.approx(0.0, abs=1e-12)

    def test_noiseless_equals_tau(self):
        panel, sched, truth = simulate_panel(n_cities=24, n_treated=6,
                                             sigma=0.0, seed=11)
        cells = brute_force_att(panel, sched)
        for (g, t), est in cells.items():
            want = truth.tau if t >= g else 0.0
            assert est == pytest.approx(want, abs=1e-8)

    def test_matches_cs_att(self):
        for seed in (0, 1, 2):
            panel, sched, _ = simulate_panel(n_cities=30, n_treated=9,
                                             sigma=0.1, seed=seed)
            cells = brute_force_att(panel, sched)
            res = cs_att(panel, sched, n_boot=0)
            got = {(r.cohort, r.year): r.estimate
                   for r in res.cells.itertuples(index=False)}
            assert set(cells) == set(got)
            for key, val in cells.items():
                assert got[key] == pytest.approx(val, abs=1e-10)

    def test_not_yet_treated_control_matches(self):
        panel, sched, _ = simulate_panel(n_cities=30, n_treated=9,
                                         sigma=0.1, seed=3)
        cells = brute_force_att(panel, sched, control="not_yet_treated")
        res = cs_att(panel, sched, control="not_yet_treated", n_boot=0)
        got = {(r.cohort, r.year): r.estimate
               for r in res.cells.itertuples(index=False)}
        for key, val in cells.items():
            assert got[key] == pytest.approx(val, abs=1e-10)

    def test_no_contrast_raises(self):
        panel = make_panel(np.ones((2, 3)))
        sched = make_schedule(panel, [1000, 1000], t0=900)
        with pytest.raises(ConfigError):
            brute_force_att(panel, sched)
