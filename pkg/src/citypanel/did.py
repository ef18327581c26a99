"""Difference-in-differences estimators for staggered institutional adoption.

The module covers the estimation strategies used throughout the package:

* :func:`ddd_static` / :func:`ddd_dynamic` — triple-difference fixed-effects
  regressions with two-way clustered errors, static and event-study form;
* :func:`cs_att` — cohort-time average treatment effects from clean 2x2
  contrasts against never-treated (or later-treated) cities;
* :func:`ipw_did`, :func:`dr_did` — propensity-reweighted and doubly robust
  versions of the same contrasts;
* :func:`imputation_att` — fixed-effects imputation of untreated potential
  outcomes;
* :func:`switcher_did` — comparisons of switchers against
  not-yet-switched cities, with symmetric pre-switch placebos.

All estimators work on ``ln(population + 1)`` by default (``outcome="log"``)
or raw levels (``outcome="level"``), and report cluster-bootstrap standard
errors resampling whole cities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    EmptyControl,
    EstimatorError,
    ExtremePropensity,
    NoSwitchers,
    NoTreatedUnits,
    SingularRVR,
    TooFewPrePeriods,
    UnidentifiedFE,
)
from .panel import BalancedPanel, TreatmentSchedule, log_outcome
from .regression import (
    DesignSpec,
    FitResult,
    WaldResult,
    logit_fit,
    ols_fit,
    wald_zero,
)
from .rng import make_rng

DEFAULT_BOOT = 1000


def pct_effect(coef: float) -> float:
    """Percent effect implied by a log-point coefficient: ``exp(coef) - 1``."""
    return float(np.expm1(coef))


def _outcome_matrix(panel: BalancedPanel, outcome: str) -> np.ndarray:
    if outcome == "log":
        return log_outcome(panel)
    if outcome == "level":
        return panel.population.astype(float)
    raise ConfigError(f"outcome must be 'log' or 'level', got {outcome!r}")


def _grid_step(years: np.ndarray) -> int:
    return int(years[1] - years[0]) if len(years) > 1 else 100


def _covariate_columns(
    panel: BalancedPanel, covariates: Sequence[str] | None
) -> dict[str, np.ndarray]:
    out = {}
    for name in covariates or ():
        if name not in panel.covariates:
            raise ConfigError(f"unknown covariate {name!r}")
        out[name] = panel.covariates[name]
    return out


# ---------------------------------------------------------------------------
# Triple-difference regressions
# ---------------------------------------------------------------------------


def _ddd_frame(panel, schedule, covariates, outcome):
    """Long frame with the triple interaction and its lower-order terms.

    ``group`` marks the rule's treatment population (Islamic-rule cities
    for the madrasa rule, the complement for the law-school rule), ``post``
    the years after the structural break, ``exposure`` the intensity path.
    Lower-order terms that the two-way fixed effects absorb are dropped
    automatically by the fit.
    """
    n, t = panel.n_cities, panel.n_years
    y = _outcome_matrix(panel, outcome)
    if schedule.rule == "europe_post1100_law_school":
        group = (~panel.islamic).astype(float)
    elif schedule.rule == "islam_post1200_madrasa":
        group = panel.islamic.astype(float)
    else:
        # generic schedules (simulations, ad-hoc treated lists): the group
        # dimension is ever-treated status
        ever = np.isfinite(schedule.cohort).astype(float)
        group = np.broadcast_to(ever[:, None], (n, t))
    post = np.broadcast_to(schedule.post.astype(float), (n, t))
    exposure = schedule.intensity

    data = {
        "y": y.ravel(),
        "city_id": np.repeat(panel.city_ids, t),
        "year": np.tile(panel.year_grid, n),
        "exposure": exposure.ravel(),
        "group_x_post": (group * post).ravel(),
        "exposure_x_post": (exposure * post).ravel(),
        "exposure_x_group": (exposure * group).ravel(),
        "triple": (group * post * exposure).ravel(),
    }
    for name, values in _covariate_columns(panel, covariates).items():
        data[name] = values.ravel()
    return pd.DataFrame(data)


@dataclass
class DddResult:
    """The triple-interaction coefficient with two-way clustered inference."""

    estimate: float
    se: float
    pvalue: float
    percent_effect: float
    n_obs: int
    fit: FitResult

    def summary(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "pvalue": self.pvalue,
            "percent_effect": self.percent_effect,
            "n_obs": self.n_obs,
            "dropped": list(self.fit.dropped),
            "flags": list(self.fit.flags),
        }

    def conf_int(self, level: float = 0.95) -> tuple[float, float]:
        """Interval for the triple coefficient (t reference, see FitResult)."""
        row = self.fit.conf_int(level).loc["triple"]
        return float(row["lower"]), float(row["upper"])


def ddd_static(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    covariates: Sequence[str] | None = None,
    outcome: str = "log",
) -> DddResult:
    """Static triple-difference regression.

    Regresses the outcome on city and year fixed effects, the
    population/post/exposure lower-order interactions, optional covariates,
    and the triple interaction ``group x post x exposure`` whose
    coefficient is the treatment effect.  Standard errors are clustered
    two-way on city and year.
    """
    if not schedule.treated.any():
        raise NoTreatedUnits("schedule has no treated city")
    data = _ddd_frame(panel, schedule, covariates, outcome)
    # triple goes first: when lower-order terms duplicate it exactly (binary
    # onset designs), the collinearity screen keeps the earliest column
    spec = DesignSpec(
        outcome="y",
        regressors=[
            "triple",
            "exposure",
            "group_x_post",
            "exposure_x_post",
            "exposure_x_group",
            *(covariates or ()),
        ],
        absorb=("city_id", "year"),
        cluster=("city_id", "year"),
    )
    fit = ols_fit(spec, data, drop_collinear=True)
    if "triple" not in fit.params.index:
        raise EstimatorError(
            "triple interaction has no identifying variation "
            f"(dropped: {fit.dropped})"
        )
    est = float(fit.params["triple"])
    return DddResult(
        estimate=est,
        se=float(fit.se["triple"]),
        pvalue=float(fit.pvalues["triple"]),
        percent_effect=pct_effect(est),
        n_obs=fit.n_obs,
        fit=fit,
    )


@dataclass
class EventStudy:
    """Event-time coefficients relative to the last pre-adoption period.

    ``coefficients``/``se`` are indexed by event time in grid steps, with
    the reference period -1 fixed at zero.  ``pretrend_pvalue`` is the
    joint Wald p-value that all leads (event time <= -2) are zero.
    """

    coefficients: pd.Series
    se: pd.Series
    reference: int
    pretrend_pvalue: float
    fit: FitResult
    lead_names: list[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"coef": self.coefficients, "se": self.se})


def _event_name(r: int) -> str:
    return f"event_m{-r}" if r < 0 else f"event_p{r}"


def ddd_dynamic(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    covariates: Sequence[str] | None = None,
    outcome: str = "log",
) -> EventStudy:
    """Event-study (dynamic) form of the triple-difference regression.

    Treated cities get indicators for every observed event time
    ``(year - cohort) / step`` except -1, the omitted reference;
    never-treated cities contribute only to the fixed effects.
    """
    if not schedule.treated.any():
        raise NoTreatedUnits("schedule has no treated city")
    n, t = panel.n_cities, panel.n_years
    years = np.asarray(panel.year_grid, dtype=float)
    step = _grid_step(years)
    rel = (years[None, :] - schedule.cohort[:, None]) / step  # inf-safe: never -> -inf
    rel[~np.isfinite(rel)] = np.nan

    observed = sorted(
        {int(r) for r in np.unique(rel[np.isfinite(rel)])} - {-1}
    )
    if not observed:
        raise EstimatorError("no event-time variation besides the reference period")

    y = _outcome_matrix(panel, outcome)
    data = {
        "y": y.ravel(),
        "city_id": np.repeat(panel.city_ids, t),
        "year": np.tile(panel.year_grid, n),
    }
    names = []
    for r in observed:
        col = np.where(np.isfinite(rel) & (rel == r), 1.0, 0.0)
        names.append(_event_name(r))
        data[names[-1]] = col.ravel()
    for name, values in _covariate_columns(panel, covariates).items():
        data[name] = values.ravel()

    spec = DesignSpec(
        outcome="y",
        regressors=[*names, *(covariates or ())],
        absorb=("city_id", "year"),
        cluster=("city_id", "year"),
    )
    fit = ols_fit(spec, pd.DataFrame(data), drop_collinear=True)

    coefs, ses = {-1: 0.0}, {-1: 0.0}
    for r in observed:
        name = _event_name(r)
        if name in fit.params.index:
            coefs[r] = float(fit.params[name])
            ses[r] = float(fit.se[name])
    order = sorted(coefs)
    coefficients = pd.Series([coefs[r] for r in order], index=order)
    se = pd.Series([ses[r] for r in order], index=order)

    lead_names = [
        _event_name(r) for r in observed if r <= -2 and _event_name(r) in fit.params.index
    ]
    if lead_names:
        # classical vcov: the lead dummies are each concentrated in one or
        # two year clusters, which makes the clustered joint variance
        # degenerate and the test wildly anti-conservative
        try:
            pretrend = wald_zero(fit, lead_names, vcov="classical").pvalue
        except SingularRVR:
            # exact-fit data (zero residual variance) leaves no test
            pretrend = float("nan")
    else:
        pretrend = float("nan")
    return EventStudy(
        coefficients=coefficients,
        se=se,
        reference=-1,
        pretrend_pvalue=float(pretrend),
        fit=fit,
        lead_names=lead_names,
    )


def pretrend_test(event: EventStudy) -> WaldResult:
    """Joint Wald test that all pre-adoption leads (<= -2) are zero."""
    if not event.lead_names:
        raise EstimatorError("event study has no leads at event time <= -2")
    return wald_zero(event.fit, event.lead_names, vcov="classical")


# ---------------------------------------------------------------------------
# Cohort-time ATT estimators
# ---------------------------------------------------------------------------


@dataclass
class AttGtResult:
    """Cohort-time effects plus their aggregations.

    ``cells`` has one row per (cohort, year) contrast, including pre-period
    placebos (every year except the base period ``cohort - step``).
    ``overall`` averages cohort means with cohort-size weights.
    """

    cells: pd.DataFrame
    by_cohort: pd.Series
    by_cohort_se: pd.Series
    by_event: pd.Series
    by_event_se: pd.Series
    overall: float
    overall_se: float
    control: str
    outcome: str
    method: str
    n_boot: int
    seed: int
    n_incomplete_boot: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def percent_effect(self) -> float:
        return pct_effect(self.overall)


def _control_mask(G, g, t_year, control):
    """Rows usable as controls for the (g, t) contrast."""
    if control == "never_treated":
        return ~np.isfinite(G)
    if control == "not_yet_treated":
        return G > max(t_year, g)
    raise ConfigError(f"unknown control group {control!r}")


def _cs_cells(Y, G, years, control, step, strict=True):
    """Raw cohort-time contrasts.

    Returns ``{(g, t): (estimate, n_treated, n_control)}`` with NaN
    estimates for undefined cells when ``strict`` is false (bootstrap
    replicates), or raises :class:`EmptyControl` when strict.
    """
    cells = {}
    year_index = {int(y): j for j, y in enumerate(years)}
    for g in sorted({float(c) for c in G if math.isfinite(c)}):
        base_year = int(g) - step
        if base_year not in year_index:
            raise TooFewPrePeriods(
                f"cohort {int(g)} has no base period {base_year} on the grid"
            )
        base = year_index[base_year]
        treated_rows = G == g
        n_tr = int(treated_rows.sum())
        dY = Y - Y[:, base][:, None]
        treated_path = dY[treated_rows].mean(axis=0) if n_tr else np.full(len(years), np.nan)
        for j, t_year in enumerate(years):
            if j == base:
                continue
            ctl = _control_mask(G, g, t_year, control)
            n_co = int(ctl.sum())
            if n_co == 0 or n_tr == 0:
                if strict:
                    raise EmptyControl(int(g), int(t_year))
                cells[(int(g), int(t_year))] = (np.nan, n_tr, n_co)
                continue
            est = float(treated_path[j] - dY[ctl, j].mean())
            cells[(int(g), int(t_year))] = (est, n_tr, n_co)
    return cells


def _aggregate_cells(cells, G, years, step):
    """Cohort, event-time and overall averages with cohort-size weights."""
    cohorts = sorted({g for g, _ in cells})
    sizes = {g: int((G == g).sum()) for g in cohorts}
    by_cohort = {}
    for g in cohorts:
        post = [est for (gg, t), (est, *_ ) in cells.items() if gg == g and t >= g]
        post = [e for e in post if not math.isnan(e)]
        by_cohort[g] = float(np.mean(post)) if post else np.nan

    weighted = [(sizes[g], by_cohort[g]) for g in cohorts if not math.isnan(by_cohort[g])]
    total = sum(w for w, _ in weighted)
    overall = sum(w * v for w, v in weighted) / total if total else np.nan

    by_event = {}
    events = sorted({(t - g) // step for g, t in cells})
    for e in events:
        num = den = 0.0
        for g in cohorts:
            key = (g, g + e * step)
            if key in cells and not math.isnan(cells[key][0]):
                num += sizes[g] * cells[key][0]
                den += sizes[g]
        by_event[e] = num / den if den else np.nan
    return by_cohort, by_event, overall


def _bootstrap_attgt(compute, N, n_boot, seed):
    """City-cluster bootstrap of an ATT computation.

    ``compute(rows)`` must return ``(cells, by_cohort, by_event, overall)``
    for the given city rows.  Returns standard deviations across replicates
    plus the number of replicates with at least one undefined cell.
    """
    if n_boot <= 0:
        return None
    overall_draws = []
    cohort_draws: dict[int, list] = {}
    event_draws: dict[int, list] = {}
    cell_draws: dict[tuple, list] = {}
    incomplete = 0
    for b in range(n_boot):
        rows = make_rng(seed, b).integers(0, N, size=N)
        try:
            cells, by_cohort, by_event, overall = compute(rows)
        except (EmptyControl, ExtremePropensity, NoTreatedUnits, UnidentifiedFE):
            incomplete += 1
            continue
        if any(math.isnan(v[0]) for v in cells.values()):
            incomplete += 1
        overall_draws.append(overall)
        for g, v in by_cohort.items():
            cohort_draws.setdefault(g, []).append(v)
        for e, v in by_event.items():
            event_draws.setdefault(e, []).append(v)
        for key, (est, *_ ) in cells.items():
            cell_draws.setdefault(key, []).append(est)

    def sd(draws):
        arr = np.asarray(draws, dtype=float)
        arr = arr[np.isfinite(arr)]
        return float(arr.std(ddof=1)) if arr.size > 1 else np.nan

    return {
        "overall": sd(overall_draws),
        "by_cohort": {g: sd(v) for g, v in cohort_draws.items()},
        "by_event": {e: sd(v) for e, v in event_draws.items()},
        "cells": {k: sd(v) for k, v in cell_draws.items()},
        "incomplete": incomplete,
    }


def _package_attgt(cells, by_cohort, by_event, overall, boot, method, control,
                   outcome, n_boot, seed, flags=None):
    cell_se = (boot or {}).get("cells", {})
    rows = [
        {
            "cohort": g,
            "year": t,
            "estimate": est,
            "se": cell_se.get((g, t), np.nan),
            "n_treated": n_tr,
            "n_control": n_co,
            "pre_period": t < g,
        }
        for (g, t), (est, n_tr, n_co) in sorted(cells.items())
    ]
    cohort_idx = sorted(by_cohort)
    event_idx = sorted(by_event)
    boot = boot or {}
    return AttGtResult(
        cells=pd.DataFrame(rows),
        by_cohort=pd.Series({g: by_cohort[g] for g in cohort_idx}),
        by_cohort_se=pd.Series(
            {g: boot.get("by_cohort", {}).get(g, np.nan) for g in cohort_idx}
        ),
        by_event=pd.Series({e: by_event[e] for e in event_idx}),
        by_event_se=pd.Series(
            {e: boot.get("by_event", {}).get(e, np.nan) for e in event_idx}
        ),
        overall=overall,
        overall_se=boot.get("overall", np.nan),
        control=control,
        outcome=outcome,
        method=method,
        n_boot=n_boot,
        seed=seed,
        n_incomplete_boot=boot.get("incomplete", 0),
        flags=list(flags or ()),
    )


def cs_att(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    control: str = "never_treated",
    outcome: str = "log",
    n_boot: int = DEFAULT_BOOT,
    seed: int = 0,
) -> AttGtResult:
    """Cohort-time average treatment effects from 2x2 mean contrasts.

    For cohort ``g`` at year ``t`` the effect is the change from the last
    pre-adoption year ``g - step`` among cohort members, minus the same
    change among controls (never-treated by default, strictly later
    adopters with ``control="not_yet_treated"``).
    """
    Y = _outcome_matrix(panel, outcome)
    G = schedule.cohort
    if not np.isfinite(G).any():
        raise NoTreatedUnits("schedule has no treated city")
    years = np.asarray(panel.year_grid)
    step = _grid_step(years)

    def compute(rows):
        cells = _cs_cells(Y[rows], G[rows], years, control, step, strict=False)
        return (cells, *_aggregate_cells(cells, G[rows], years, step))

    cells = _cs_cells(Y, G, years, control, step, strict=True)
    by_cohort, by_event, overall = _aggregate_cells(cells, G, years, step)
    boot = _bootstrap_attgt(compute, panel.n_cities, n_boot, seed)
    return _package_attgt(
        cells, by_cohort, by_event, overall, boot,
        "cs", control, outcome, n_boot, seed,
    )


def _covariate_base_matrix(panel, covariates, base_index):
    cols = [panel.covariates[name][:, base_index] for name in covariates or ()]
    return np.column_stack(cols) if cols else np.empty((panel.n_cities, 0))


def _weighted_cells(Y, G, years, control, step, base_X, method,
                    trim, strict=True):
    """IPW / doubly robust cohort-time contrasts.

    ``base_X[g]`` maps each cohort to the city-level covariate matrix
    evaluated at that cohort's base period.  Controls with propensities
    outside the trim bounds are excluded (and counted).
    """
    lo, hi = trim
    cells = {}
    n_trimmed = 0
    year_index = {int(y): j for j, y in enumerate(years)}
    for g in sorted({float(c) for c in G if math.isfinite(c)}):
        base = year_index[int(g) - step]
        treated_rows = G == g
        n_tr = int(treated_rows.sum())
        dY = Y - Y[:, base][:, None]
        for j, t_year in enumerate(years):
            if j == base:
                continue
            ctl = _control_mask(G, g, t_year, control)
            key = (int(g), int(t_year))
            if n_tr == 0 or not ctl.any():
                if strict:
                    raise EmptyControl(*key)
                cells[key] = (np.nan, n_tr, 0)
                continue
            sample = treated_rows | ctl
            d = treated_rows[sample].astype(float)
            X = np.column_stack([np.ones(sample.sum()), base_X[g][sample]])
            p = logit_fit(d, X).fitted
            keep_ctl = (p >= lo) & (p <= hi) | (d == 1.0)
            n_trimmed += int((~keep_ctl).sum())
            dYs = dY[sample, j]
            d_k, p_k, dY_k = d[keep_ctl], p[keep_ctl], dYs[keep_ctl]
            if not (d_k == 0.0).any():
                if strict:
                    raise ExtremePropensity(
                        f"all controls trimmed for cohort {int(g)} at {int(t_year)}"
                    )
                cells[key] = (np.nan, n_tr, 0)
                continue
            w = p_k / (1.0 - p_k)
            ctl_rows = d_k == 0.0
            if method == "ipw":
                treated_term = dY_k[d_k == 1.0].mean()
                ctl_term = np.average(dY_k[ctl_rows], weights=w[ctl_rows])
                est = treated_term - ctl_term
            else:  # doubly robust: residualise on the control outcome model
                Xk = np.column_stack([np.ones(keep_ctl.sum()), base_X[g][sample][keep_ctl]])
                beta, *_ = np.linalg.lstsq(Xk[ctl_rows], dY_k[ctl_rows], rcond=None)
                resid = dY_k - Xk @ beta
                est = resid[d_k == 1.0].mean() - np.average(
                    resid[ctl_rows], weights=w[ctl_rows]
                )
            cells[key] = (float(est), n_tr, int(ctl_rows.sum()))
    return cells, n_trimmed


def _weighted_att(panel, schedule, covariates, control, outcome, n_boot, seed,
                  trim, method):
    Y = _outcome_matrix(panel, outcome)
    G = schedule.cohort
    if not np.isfinite(G).any():
        raise NoTreatedUnits("schedule has no treated city")
    years = np.asarray(panel.year_grid)
    step = _grid_step(years)
    year_index = {int(y): j for j, y in enumerate(years)}
    base_X = {
        float(g): _covariate_base_matrix(panel, covariates, year_index[int(g) - step])
        for g in np.unique(G[np.isfinite(G)])
    }

    def compute(rows):
        bX = {g: X[rows] for g, X in base_X.items()}
        cells, _ = _weighted_cells(
            Y[rows], G[rows], years, control, step, bX, method, trim, strict=False
        )
        return (cells, *_aggregate_cells(cells, G[rows], years, step))

    cells, n_trimmed = _weighted_cells(
        Y, G, years, control, step, base_X, method, trim, strict=True
    )
    by_cohort, by_event, overall = _aggregate_cells(cells, G, years, step)
    boot = _bootstrap_attgt(compute, panel.n_cities, n_boot, seed)
    flags = [f"trimmed_controls={n_trimmed}"] if n_trimmed else []
    return _package_attgt(
        cells, by_cohort, by_event, overall, boot,
        method, control, outcome, n_boot, seed, flags,
    )


def ipw_did(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    covariates: Sequence[str] | None = None,
    control: str = "never_treated",
    outcome: str = "log",
    n_boot: int = DEFAULT_BOOT,
    seed: int = 0,
    trim: tuple[float, float] = (0.01, 0.99),
) -> AttGtResult:
    """Propensity-reweighted cohort-time effects.

    A logit of cohort membership on base-period covariates supplies odds
    weights for the control outcome changes; with constant covariates the
    weights are uniform and the estimator reduces to :func:`cs_att`.
    Controls with propensities outside ``trim`` are excluded and counted.
    """
    return _weighted_att(
        panel, schedule, covariates, control, outcome, n_boot, seed, trim, "ipw"
    )


def dr_did(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    covariates: Sequence[str] | None = None,
    control: str = "never_treated",
    outcome: str = "log",
    n_boot: int = DEFAULT_BOOT,
    seed: int = 0,
    trim: tuple[float, float] = (0.01, 0.99),
) -> AttGtResult:
    """Doubly robust cohort-time effects.

    Combines the propensity weights of :func:`ipw_did` with a control-group
    regression of outcome changes on covariates; consistent when either
    model is correct.  With constant covariates both models are constant
    and the estimator reduces to :func:`cs_att` exactly.
    """
    return _weighted_att(
        panel, schedule, covariates, control, outcome, n_boot, seed, trim, "dr"
    )


# ---------------------------------------------------------------------------
# Fixed-effects imputation
# ---------------------------------------------------------------------------


@dataclass
class ImputationResult:
    """Treated-cell effects from imputed untreated outcomes."""

    overall: float
    overall_se: float
    cell_effects: pd.DataFrame
    by_group_time: pd.Series
    dropped_cities: list[str]
    dropped_years: list[int]
    n_boot: int
    seed: int
    flags: list[str] = field(default_factory=list)

    @property
    def percent_effect(self) -> float:
        return pct_effect(self.overall)


def _two_way_predict(Y, untreated, X=None, tol=1e-12, max_iter=100_000):
    """Least-squares city and year effects (plus covariates) on untreated cells.

    Returns fitted values for every cell, built as ``c_i + a_t + X beta``
    with the effects estimated by alternating group means on the untreated
    mask.  Cities or years without untreated cells get NaN fits.
    """
    n, t = Y.shape
    mask = untreated.astype(bool)
    beta = None
    if X is not None and X.shape[2] > 0:
        k = X.shape[2]
        rows = np.argwhere(mask)
        yv = Y[mask]
        Xv = X[mask]
        ci = rows[:, 0]
        tj = rows[:, 1]
        # demean y and X within city and year on the untreated sample
        work = np.column_stack([yv, Xv])
        from .regression import _demean_inplace, _group_codes

        codes = [_group_codes(ci), _group_codes(tj)]
        _demean_inplace(work, codes, None, 1e-12, 100_000)
        beta, *_ = np.linalg.lstsq(work[:, 1:], work[:, 0], rcond=None)
        R = Y - X @ beta
    else:
        R = Y.copy()

    c = np.zeros(n)
    a = np.zeros(t)
    counts_i = mask.sum(axis=1).astype(float)
    counts_t = mask.sum(axis=0).astype(float)
    ok_i = counts_i > 0
    ok_t = counts_t > 0
    Rm = np.where(mask, R, 0.0)
    for _ in range(max_iter):
        new_c = np.where(
            ok_i, (Rm - np.where(mask, a[None, :], 0.0)).sum(axis=1) / np.where(ok_i, counts_i, 1.0), 0.0
        )
        new_a = np.where(
            ok_t, (Rm - np.where(mask, new_c[:, None], 0.0)).sum(axis=0) / np.where(ok_t, counts_t, 1.0), 0.0
        )
        delta = max(np.abs(new_c - c).max(), np.abs(new_a - a).max())
        c, a = new_c, new_a
        if delta < tol:
            break
    fitted = c[:, None] + a[None, :]
    if beta is not None:
        fitted = fitted + X @ beta
    fitted[~ok_i, :] = np.nan
    fitted[:, ~ok_t] = np.nan
    return fitted, ok_i, ok_t


def imputation_att(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    covariates: Sequence[str] | None = None,
    outcome: str = "log",
    n_boot: int = 0,
    seed: int = 0,
) -> ImputationResult:
    """Impute untreated potential outcomes cell by cell.

    City and year effects (plus covariate slopes) are fit on untreated
    cells only; the treated-cell effect is the gap between the observed
    outcome and the imputed fit.  Cities treated from the first grid year,
    or years with no untreated observation, cannot be imputed: their cells
    are dropped and reported.
    """
    Y = _outcome_matrix(panel, outcome)
    G = schedule.cohort
    if not np.isfinite(G).any():
        raise NoTreatedUnits("schedule has no treated city")
    years = np.asarray(panel.year_grid, dtype=float)
    onset = years[None, :] >= G[:, None]
    untreated = ~onset
    X = None
    if covariates:
        X = np.stack([panel.covariates[name] for name in covariates], axis=2)

    def compute_cells(Yv, Gv, Xv, untr):
        fitted, ok_i, ok_t = _two_way_predict(Yv, untr, Xv)
        tau = Yv - fitted
        return tau, ok_i, ok_t

    tau, ok_i, ok_t = compute_cells(Y, G, X, untreated)
    if not ok_i.all():
        dropped_cities = [panel.city_ids[i] for i in np.nonzero(~ok_i)[0]]
    else:
        dropped_cities = []
    dropped_years = [int(panel.year_grid[j]) for j in np.nonzero(~ok_t)[0]]

    eff_mask = onset & np.isfinite(tau)
    if not eff_mask.any():
        raise UnidentifiedFE("no treated cell has an imputable counterfactual")
    overall = float(tau[eff_mask].mean())

    rows = []
    for i, j in np.argwhere(eff_mask):
        rows.append(
            {
                "city_id": panel.city_ids[i],
                "year": int(panel.year_grid[j]),
                "cohort": int(G[i]),
                "effect": float(tau[i, j]),
            }
        )
    cell_effects = pd.DataFrame(rows)
    by_gt = (
        cell_effects.groupby(["cohort", "year"])["effect"].mean()
        if rows
        else pd.Series(dtype=float)
    )

    overall_se = np.nan
    if n_boot > 0:
        draws = []
        N = panel.n_cities
        for b in range(n_boot):
            idx = make_rng(seed, b).integers(0, N, size=N)
            untr_b = untreated[idx]
            if not untr_b.any(axis=0).all():
                continue
            X_b = X[idx] if X is not None else None
            tau_b, ok_i_b, ok_t_b = compute_cells(Y[idx], G[idx], X_b, untr_b)
            m = (years[None, :] >= G[idx][:, None]) & np.isfinite(tau_b)
            if m.any():
                draws.append(tau_b[m].mean())
        if len(draws) > 1:
            overall_se = float(np.std(draws, ddof=1))

    flags = []
    if dropped_cities:
        flags.append(f"unidentified_city_fe={len(dropped_cities)}")
    if dropped_years:
        flags.append(f"unidentified_year_fe={len(dropped_years)}")
    return ImputationResult(
        overall=overall,
        overall_se=overall_se,
        cell_effects=cell_effects,
        by_group_time=by_gt,
        dropped_cities=dropped_cities,
        dropped_years=dropped_years,
        n_boot=n_boot,
        seed=seed,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Switcher estimator
# ---------------------------------------------------------------------------


@dataclass
class SwitcherResult:
    """Instantaneous and dynamic switcher contrasts with placebos.

    ``estimate`` is the switch-year effect; ``dynamic[l]`` compares the
    change from the last pre-switch year to ``l`` grid steps after the
    switch, against cities not yet switched by then.  ``placebos[l]`` runs
    the symmetric comparison ``l + 1`` steps before the switch, where the
    effect should be zero.
    """

    estimate: float
    se: float
    dynamic: pd.Series
    dynamic_se: pd.Series
    placebo: float
    placebo_se: float
    placebos: pd.Series
    n_switchers: int
    n_boot: int
    seed: int

    @property
    def percent_effect(self) -> float:
        return pct_effect(self.estimate)


def _switcher_contrast(Y, G, years, horizon, kind):
    """Weighted switcher-vs-not-yet contrast at one horizon.

    ``kind="effect"`` measures Y[g+h] - Y[g-1]; ``kind="placebo"``
    measures Y[g-1-(h+1)] - Y[g-1].  Weights are switcher counts.
    Returns NaN when no cohort supports the horizon.
    """
    step = _grid_step(years)
    year_index = {int(y): j for j, y in enumerate(years)}
    num = den = 0.0
    for g in sorted({float(c) for c in G if math.isfinite(c)}):
        base_year = int(g) - step
        if kind == "effect":
            target_year = int(g) + horizon * step
            ctl_after = target_year
        else:
            target_year = base_year - (horizon + 1) * step
            ctl_after = int(g)  # controls only need to be untreated pre-switch
        if base_year not in year_index or target_year not in year_index:
            continue
        b, m = year_index[base_year], year_index[target_year]
        switchers = G == g
        controls = G > ctl_after
        if not switchers.any() or not controls.any():
            continue
        d = Y[:, m] - Y[:, b]
        contrast = d[switchers].mean() - d[controls].mean()
        w = switchers.sum()
        num += w * contrast
        den += w
    return (num / den, int(den)) if den else (np.nan, 0)


def switcher_did(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    max_horizon: int = 5,
    outcome: str = "log",
    n_boot: int = DEFAULT_BOOT,
    seed: int = 0,
) -> SwitcherResult:
    """Switcher estimator with symmetric pre-switch placebos.

    Cities switching into treatment at ``g`` are compared, horizon by
    horizon, to cities that have not yet switched by the measurement year.
    Raises :class:`NoSwitchers` when the switch-year contrast is empty;
    longer horizons without support are reported as NaN.
    """
    Y = _outcome_matrix(panel, outcome)
    G = schedule.cohort
    years = np.asarray(panel.year_grid)
    if not np.isfinite(G).any():
        raise NoTreatedUnits("schedule has no treated city")

    def all_contrasts(Yv, Gv):
        dyn = {}
        plc = {}
        for h in range(0, max_horizon + 1):
            dyn[h], n_sw = _switcher_contrast(Yv, Gv, years, h, "effect")
            plc[h], _ = _switcher_contrast(Yv, Gv, years, h, "placebo")
        return dyn, plc

    dynamic, placebos = all_contrasts(Y, G)
    _, n_switchers = _switcher_contrast(Y, G, years, 0, "effect")
    if math.isnan(dynamic[0]) or n_switchers == 0:
        raise NoSwitchers(0)

    dyn_draws: dict[int, list] = {h: [] for h in dynamic}
    plc_draws: dict[int, list] = {h: [] for h in placebos}
    if n_boot > 0:
        N = panel.n_cities
        for b in range(n_boot):
            idx = make_rng(seed, b).integers(0, N, size=N)
            dyn_b, plc_b = all_contrasts(Y[idx], G[idx])
            for h, v in dyn_b.items():
                dyn_draws[h].append(v)
            for h, v in plc_b.items():
                plc_draws[h].append(v)

    def sd(values):
        arr = np.asarray(values, dtype=float)
        arr = arr[np.isfinite(arr)]
        return float(arr.std(ddof=1)) if arr.size > 1 else np.nan

    horizons = sorted(dynamic)
    return SwitcherResult(
        estimate=float(dynamic[0]),
        se=sd(dyn_draws[0]),
        dynamic=pd.Series({h: dynamic[h] for h in horizons}),
        dynamic_se=pd.Series({h: sd(dyn_draws[h]) for h in horizons}),
        placebo=float(placebos[0]),
        placebo_se=sd(plc_draws[0]),
        placebos=pd.Series({h: placebos[h] for h in horizons}),
        n_switchers=n_switchers,
        n_boot=n_boot,
        seed=seed,
    )
