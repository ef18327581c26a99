import math
import warnings

import numpy as np
import pytest

from citypanel.breaks import (
    MIN_OBS,
    SHORT_SERIES_T,
    ShortSeriesWarning,
    aggregate_series,
    zivot_andrews,
)
from citypanel.errors import EmptyRegion, SeriesTooShort
from citypanel.panel import Region, log_outcome

from conftest import make_panel


def _ar1_with_shift(T=100, shift_at=60, size=5.0, rho=0.5, sigma=1.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros(T)
    for t in range(1, T):
        y[t] = rho * y[t - 1] + rng.normal(0, sigma)
    y[shift_at:] += size * sigma
    return y


class TestZivotAndrews:
    def test_finds_planted_break(self):
        y = _ar1_with_shift(seed=3)
        res = zivot_andrews(y, model="intercept")
        assert abs(res.break_index - 60) <= 1
        assert res.rejects("5%")
        assert res.statistic < res.critical_values["5%"]

    def test_constant_shift_invariance(self):
        y = _ar1_with_shift(seed=5)
        a = zivot_andrews(y)
        b = zivot_andrews(y + 1234.5)
        assert a.statistic == pytest.approx(b.statistic, abs=1e-8)
        assert a.break_index == b.break_index

    def test_deterministic(self):
        y = _ar1_with_shift(seed=7)
        a, b = zivot_andrews(y), zivot_andrews(y)
        assert a.statistic == b.statistic
        assert a.break_index == b.break_index
        assert a.candidate_stats.equals(b.candidate_stats)

    def test_trim_bounds(self):
        y = _ar1_with_shift(T=80, shift_at=40, seed=9)
        trim = 0.15
        res = zivot_andrews(y, trim=trim)
        margin = math.ceil(trim * 80)
        assert margin <= res.break_index < 80 - margin
        # every candidate respects the trim window
        assert len(res.candidate_stats) == 80 - 2 * margin

    def test_break_label_follows_series_index(self):
        import pandas as pd

        y = _ar1_with_shift(seed=11)
        years = pd.RangeIndex(1900, 2000)
        res = zivot_andrews(pd.Series(y, index=list(years)), model="intercept")
        assert res.break_label == 1900 + res.break_index

    def test_short_series_warns(self):
        y = _ar1_with_shift(T=SHORT_SERIES_T - 5, shift_at=12, seed=13)
        with pytest.warns(ShortSeriesWarning):
            res = zivot_andrews(y)
        assert res.short_series

    def test_long_series_no_warning(self):
        y = _ar1_with_shift(seed=15)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = zivot_andrews(y)
        assert not res.short_series

    def test_too_short(self):
        with pytest.raises(SeriesTooShort):
            zivot_andrews(np.arange(MIN_OBS - 1, dtype=float))

    def test_non_finite_rejected(self):
        y = _ar1_with_shift(seed=17)
        y[10] = np.nan
        with pytest.raises(SeriesTooShort):
            zivot_andrews(y)

    def test_model_and_trim_validation(self):
        y = _ar1_with_shift(seed=19)
        with pytest.raises(ValueError):
            zivot_andrews(y, model="banana")
        with pytest.raises(ValueError):
            zivot_andrews(y, trim=0.0)

    def test_pvalue_monotone_in_statistic(self):
        # a strongly stationary series has a more negative statistic and a
        # smaller interpolated p-value than a random walk
        rng = np.random.default_rng(21)
        stationary = zivot_andrews(rng.normal(size=150))
        walk = zivot_andrews(np.cumsum(rng.normal(size=150)))
        assert stationary.statistic < walk.statistic
        assert stationary.pvalue <= walk.pvalue
        assert stationary.pvalue_approximate and walk.pvalue_approximate

    def test_critical_values_ordered(self):
        res = zivot_andrews(_ar1_with_shift(seed=23))
        cv = res.critical_values
        assert cv["1%"] < cv["5%"] < cv["10%"] < 0


class TestAggregateSeries:
    def test_single_city_mean_is_its_series(self):
        pop = np.array([[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]])
        panel = make_panel(pop, islamic=[False, True])
        series = aggregate_series(panel, Region.WESTERN_EUROPE)
        np.testing.assert_allclose(series.to_numpy(), np.log1p(pop[0]))
        assert list(series.index) == [800, 900, 1000]

    def test_mean_over_cities(self):
        pop = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        panel = make_panel(pop)
        series = aggregate_series(panel)
        np.testing.assert_allclose(series.to_numpy(),
                                   np.log1p(pop).mean(axis=0))

    def test_statistics_and_raw_scale(self):
        pop = np.abs(np.random.default_rng(1).normal(10, 3, size=(5, 4)))
        panel = make_panel(pop)
        np.testing.assert_allclose(
            aggregate_series(panel, statistic="median", log=False).to_numpy(),
            np.median(pop, axis=0))
        np.testing.assert_allclose(
            aggregate_series(panel, statistic="sum", log=False).to_numpy(),
            pop.sum(axis=0))
        with pytest.raises(ValueError):
            aggregate_series(panel, statistic="mode")

    def test_empty_region(self):
        panel = make_panel(np.ones((2, 2)), islamic=[False, False])
        with pytest.raises(EmptyRegion):
            aggregate_series(panel, Region.GRANADA)

    def test_region_set(self):
        pop = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        panel = make_panel(pop, islamic=[False, True, True])
        both = aggregate_series(panel, {Region.LEVANTINE, Region.WESTERN_EUROPE})
        np.testing.assert_allclose(both.to_numpy(), np.log1p(pop).mean(axis=0))

    def test_matches_log_outcome(self):
        pop = np.random.default_rng(2).uniform(0, 50, size=(4, 3))
        panel = make_panel(pop)
        series = aggregate_series(panel)
        np.testing.assert_allclose(series.to_numpy(),
                                   log_outcome(panel).mean(axis=0), atol=1e-15)
