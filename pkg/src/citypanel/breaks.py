"""Endogenous structural-break unit-root test and regional aggregates.

The test regresses, for every admissible break date, the first difference
of the series on its lagged level, deterministic terms, break dummies and
lagged differences, and reports the break date minimising the t-statistic
on the lagged level.  A very negative minimum t rejects the unit-root
null in favour of break-stationarity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyRegion, SeriesTooShort
from .panel import BalancedPanel, Region, log_outcome

#: Minimum observations for the test, and the length below which a
#: short-series warning is attached (century panels are near this floor).
MIN_OBS = 12
SHORT_SERIES_T = 25


class ShortSeriesWarning(UserWarning):
    """The series is long enough to compute but too short for the
    asymptotic critical values to be taken at face value."""


# Quantile tables for the minimum-t statistic, simulated under the
# unit-root null (100,000 replications, 2,000 observations).  Rows are
# (percentile, statistic) pairs; linear interpolation gives approximate
# p-values and the 1/5/10% critical values.
_CRIT_INTERCEPT = (
    (0.001, -6.78442), (0.100, -5.83192), (0.200, -5.68139),
    (0.300, -5.58461), (0.400, -5.51308), (0.500, -5.45043),
    (0.600, -5.39924), (0.700, -5.36023), (0.800, -5.33219),
    (0.900, -5.30294), (1.000, -5.27644), (2.500, -5.03340),
    (5.000, -4.81067), (7.500, -4.67636), (10.000, -4.56618),
    (12.500, -4.48130), (15.000, -4.40507), (17.500, -4.33947),
    (20.000, -4.28155), (22.500, -4.22683), (25.000, -4.17830),
    (27.500, -4.13101), (30.000, -4.08586), (32.500, -4.04455),
    (35.000, -4.00380), (37.500, -3.96144), (40.000, -3.92078),
    (42.500, -3.88178), (45.000, -3.84503), (47.500, -3.80549),
    (50.000, -3.77031), (52.500, -3.73209), (55.000, -3.69600),
    (57.500, -3.65985), (60.000, -3.62126), (65.000, -3.54580),
    (70.000, -3.46848), (75.000, -3.38533), (80.000, -3.29112),
    (85.000, -3.17832), (90.000, -3.04165), (92.500, -2.95146),
    (95.000, -2.83179), (96.000, -2.76465), (97.000, -2.68624),
    (98.000, -2.57884), (99.000, -2.40044), (99.900, -1.88932),
)
_CRIT_TREND = (
    (0.001, -83.9094), (0.100, -13.8837), (0.200, -9.13205),
    (0.300, -6.32564), (0.400, -5.60803), (0.500, -5.38794),
    (0.600, -5.26585), (0.700, -5.18734), (0.800, -5.12756),
    (0.900, -5.07984), (1.000, -5.03421), (2.500, -4.65634),
    (5.000, -4.40580), (7.500, -4.25214), (10.000, -4.13678),
    (12.500, -4.03765), (15.000, -3.95185), (17.500, -3.87945),
    (20.000, -3.81295), (22.500, -3.75273), (25.000, -3.69836),
    (27.500, -3.64785), (30.000, -3.59819), (32.500, -3.55146),
    (35.000, -3.50522), (37.500, -3.45987), (40.000, -3.41672),
    (42.500, -3.37465), (45.000, -3.33394), (47.500, -3.29393),
    (50.000, -3.25316), (52.500, -3.21244), (55.000, -3.17124),
    (57.500, -3.13211), (60.000, -3.09204), (65.000, -3.01135),
    (70.000, -2.92897), (75.000, -2.83614), (80.000, -2.73893),
    (85.000, -2.62840), (90.000, -2.49611), (92.500, -2.41337),
    (95.000, -2.30820), (96.000, -2.25797), (97.000, -2.19648),
    (98.000, -2.11320), (99.000, -1.99138), (99.900, -1.67466),
)
_CRIT_BOTH = (
    (0.001, -38.17800), (0.100, -6.43107), (0.200, -6.07279),
    (0.300, -5.95496), (0.400, -5.86254), (0.500, -5.77081),
    (0.600, -5.72541), (0.700, -5.68406), (0.800, -5.65163),
    (0.900, -5.60419), (1.000, -5.57556), (2.500, -5.29704),
    (5.000, -5.07332), (7.500, -4.93003), (10.000, -4.82668),
    (12.500, -4.73711), (15.000, -4.66020), (17.500, -4.58970),
    (20.000, -4.52855), (22.500, -4.47100), (25.000, -4.42011),
    (27.500, -4.37387), (30.000, -4.32705), (32.500, -4.28126),
    (35.000, -4.23793), (37.500, -4.19822), (40.000, -4.15800),
    (42.500, -4.11946), (45.000, -4.08064), (47.500, -4.04286),
    (50.000, -4.00489), (52.500, -3.96837), (55.000, -3.93200),
    (57.500, -3.89496), (60.000, -3.85577), (65.000, -3.77795),
    (70.000, -3.69794), (75.000, -3.61852), (80.000, -3.52485),
    (85.000, -3.41665), (90.000, -3.28527), (92.500, -3.19724),
    (95.000, -3.08769), (96.000, -3.03088), (97.000, -2.96091),
    (98.000, -2.85581), (99.000, -2.71015), (99.900, -2.28767),
)
_CRIT_TABLES = {
    "intercept": np.asarray(_CRIT_INTERCEPT),
    "trend": np.asarray(_CRIT_TREND),
    "both": np.asarray(_CRIT_BOTH),
}


@dataclass
class BreakTestResult:
    """Outcome of the endogenous-break unit-root test.

    ``statistic`` is the minimum t on the lagged level over admissible
    break dates; ``break_index``/``break_label`` locate the first
    observation of the new regime.  ``pvalue`` is interpolated from the
    simulated null quantiles and therefore approximate
    (``pvalue_approximate`` is always true).
    """

    statistic: float
    break_index: int
    break_label: object
    model: str
    lags: int
    trim: float
    n_obs: int
    pvalue: float
    pvalue_approximate: bool
    critical_values: dict[str, float]
    candidate_stats: pd.Series
    short_series: bool

    def rejects(self, level: str = "5%") -> bool:
        return self.statistic < self.critical_values[level]


def _ols_tstats(y: np.ndarray, X: np.ndarray) -> np.ndarray:
    """t-statistics of an OLS fit, via the normal equations.

    Near-singular designs can push diagonal variance terms fractionally
    below zero; those coordinates come back NaN rather than warning.
    """
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ (X.T @ y)
    resid = y - X @ beta
    dof = X.shape[0] - X.shape[1]
    sigma2 = float(resid @ resid) / dof
    with np.errstate(invalid="ignore", divide="ignore"):
        return beta / np.sqrt(np.diag(sigma2 * xtx_inv))


def _select_lags(dy, ylag, trend, max_lag, threshold=1.645):
    """Largest lag whose final-difference t-stat is significant.

    Walks down from ``max_lag`` on the no-break autoregression, keeping the
    first lag length whose last lagged difference has |t| above the
    threshold; returns 0 when none does.
    """
    for k in range(max_lag, 0, -1):
        rows = len(dy) - k
        X = [np.ones(rows), trend[k:], ylag[k:]]
        X += [dy[k - j - 1 : len(dy) - j - 1] for j in range(k)]
        t = _ols_tstats(dy[k:], np.column_stack(X))
        if abs(t[-1]) > threshold:
            return k
    return 0


def zivot_andrews(
    series,
    trim: float = 0.15,
    max_lag: int | None = None,
    model: str = "both",
) -> BreakTestResult:
    """Minimum-t unit-root test allowing one endogenous break.

    Parameters
    ----------
    series : sequence or pd.Series
        The level series (e.g. a log regional mean).  A Series index
        provides the break labels (years).
    trim : float
        Fraction trimmed from each end: candidate break dates exclude the
        first and last ``ceil(trim * T)`` observations.
    max_lag : int, optional
        Maximum augmentation lags; defaults to the Schwert rule
        ``12 * (T/100)^.25`` capped so the regression keeps positive dof.
        The working lag order is chosen once, on the no-break
        autoregression, as the largest lag with a significant (|t| > 1.645)
        final difference.
    model : {"intercept", "trend", "both"}
        Which deterministic terms may break: the level, the trend slope,
        or both.

    Returns
    -------
    BreakTestResult
        The reported break is the candidate minimising the t-statistic on
        the lagged level; exact ties resolve to the earliest date.
    """
    if model not in _CRIT_TABLES:
        raise ValueError(f"model must be one of {sorted(_CRIT_TABLES)}")
    if isinstance(series, pd.Series):
        labels = list(series.index)
        y = series.to_numpy(dtype=float)
    else:
        y = np.asarray(series, dtype=float)
        labels = list(range(len(y)))
    T = len(y)
    if T < MIN_OBS:
        raise SeriesTooShort(f"need at least {MIN_OBS} observations, got {T}")
    if not np.all(np.isfinite(y)):
        raise SeriesTooShort("series contains non-finite values")
    if not 0.0 < trim < 0.5:
        raise ValueError("trim must lie in (0, 0.5)")

    short = T < SHORT_SERIES_T
    if short:
        warnings.warn(
            f"series length {T} < {SHORT_SERIES_T}: asymptotic critical values "
            "are a rough guide only",
            ShortSeriesWarning,
            stacklevel=2,
        )

    dy = np.diff(y)  # dy[t-1] = y[t] - y[t-1], t = 1..T-1
    ylag = y[:-1]
    trend_full = np.arange(1, T)  # time index aligned with dy

    if max_lag is None:
        max_lag = int(np.ceil(12.0 * (T / 100.0) ** 0.25))
    max_lag = max(0, min(max_lag, (T - 10) // 2))
    lags = _select_lags(dy, ylag, trend_full, max_lag) if max_lag > 0 else 0

    k = lags
    rows = len(dy) - k
    dep = dy[k:]
    base_cols = [np.ones(rows)]
    if model in ("trend", "both"):
        base_cols.append(trend_full[k:])
    base_cols.append(ylag[k:])
    lag_cols = [dy[k - j - 1 : len(dy) - j - 1] for j in range(k)]
    alpha_pos = len(base_cols) - 1  # position of the lagged level

    margin = int(np.ceil(trim * T))
    candidates = range(margin, T - margin)  # first index of the new regime
    if len(candidates) == 0:
        raise SeriesTooShort(
            f"trim {trim} leaves no interior break candidates for T={T}"
        )

    # observation t of the regression uses original time index k+1 .. T-1
    obs_time = np.arange(k + 1, T)
    stats_by_candidate = {}
    best_stat, best_idx = np.inf, None
    for b in candidates:
        cols = list(base_cols)
        if model in ("intercept", "both"):
            cols.insert(1, (obs_time >= b).astype(float))
        if model in ("trend", "both"):
            cols.insert(len(cols) - 1, np.maximum(obs_time - b + 1, 0).astype(float))
        X = np.column_stack(cols + lag_cols)
        extra = len(cols) - len(base_cols)
        t_alpha = float(_ols_tstats(dep, X)[alpha_pos + extra])
        stats_by_candidate[labels[b]] = t_alpha
        if t_alpha < best_stat:  # strict: earliest candidate wins ties
            best_stat, best_idx = t_alpha, b

    table = _CRIT_TABLES[model]
    pvalue = float(np.interp(best_stat, table[:, 1], table[:, 0]) / 100.0)
    crit = np.interp([1.0, 5.0, 10.0], table[:, 0], table[:, 1])
    return BreakTestResult(
        statistic=best_stat,
        break_index=best_idx,
        break_label=labels[best_idx],
        model=model,
        lags=lags,
        trim=trim,
        n_obs=T,
        pvalue=pvalue,
        pvalue_approximate=True,
        critical_values={"1%": crit[0], "5%": crit[1], "10%": crit[2]},
        candidate_stats=pd.Series(stats_by_candidate),
        short_series=short,
    )


def aggregate_series(
    panel: BalancedPanel,
    regions: Region | Iterable[Region] | None = None,
    statistic: str = "mean",
    log: bool = True,
) -> pd.Series:
    """Per-year aggregate of city outcomes for a set of regions.

    ``statistic`` is one of ``mean``/``median``/``sum`` applied across the
    selected cities, year by year, on ``ln(population + 1)`` by default.
    """
    if regions is None:
        mask = np.ones(panel.n_cities, dtype=bool)
    else:
        if isinstance(regions, Region):
            regions = {regions}
        wanted = set(regions)
        mask = np.array([c.region in wanted for c in panel.cities])
    if not mask.any():
        raise EmptyRegion(f"no cities in regions {regions}")
    values = log_outcome(panel) if log else panel.population
    sub = values[mask]
    funcs = {"mean": np.mean, "median": np.median, "sum": np.sum}
    try:
        agg = funcs[statistic]
    except KeyError:
        raise ValueError(f"statistic must be one of {sorted(funcs)}") from None
    return pd.Series(agg(sub, axis=0), index=list(panel.year_grid), name=statistic)
