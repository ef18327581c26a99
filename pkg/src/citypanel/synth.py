"""Classical synthetic control: simplex-constrained matching and placebos.

A treated city's counterfactual path is a convex combination of donor
cities chosen to match pre-treatment predictors.  Weights solve

    min_W (X1 - X0 W)' V (X1 - X0 W),   W >= 0, sum W = 1

by a fully corrective Frank-Wolfe method whose correction step solves the
equality-constrained least squares on the active support exactly, so the
solver is deterministic and terminates when the objective improvement and
the Frank-Wolfe gap fall below 1e-12.

Inference is by permutation: refit every donor as a pseudo-treated unit
and rank the treated post/pre RMSPE ratio in the placebo distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize

from .errors import (
    ConfigError,
    DegenerateV,
    EstimatorError,
    TooFewPrePeriods,
)
from .panel import BalancedPanel
from .rng import make_rng

QP_TOL = 1e-12
PLACEBO_CAP = 10_000


@dataclass
class ScmProblem:
    """Data for one synthetic-control fit.

    ``predictors_treated``/``predictors_donors`` hold the matching matrix
    (k predictors by 1 and by J donors); outcomes are full paths so gaps
    can be reported for every year.  ``predictors_are_path`` records
    whether the predictors are simply the pre-period outcome rows, which
    short-circuits predictor-weight selection to uniform.
    """

    treated_id: str
    donor_ids: list[str]
    predictor_names: list[str]
    predictors_treated: np.ndarray
    predictors_donors: np.ndarray
    years: np.ndarray
    pre_mask: np.ndarray
    y_treated: np.ndarray
    y_donors: np.ndarray
    predictors_are_path: bool
    group_size: int = 1

    def __post_init__(self):
        self.predictors_treated = np.asarray(self.predictors_treated, dtype=float).ravel()
        self.predictors_donors = np.asarray(self.predictors_donors, dtype=float)
        self.years = np.asarray(self.years)
        self.pre_mask = np.asarray(self.pre_mask, dtype=bool)
        self.y_treated = np.asarray(self.y_treated, dtype=float).ravel()
        self.y_donors = np.asarray(self.y_donors, dtype=float)
        k = len(self.predictors_treated)
        j = len(self.donor_ids)
        if self.predictors_donors.shape != (k, j):
            raise ConfigError(
                f"predictor matrix shape {self.predictors_donors.shape}, "
                f"expected {(k, j)}"
            )
        if self.y_donors.shape != (j, len(self.years)):
            raise ConfigError("donor outcome matrix does not match years/donors")
        if j < 2:
            raise ConfigError("need at least two donors")

    @property
    def n_pre(self) -> int:
        return int(self.pre_mask.sum())


def build_scm_problem(
    panel: BalancedPanel,
    treated: str | Sequence[str],
    t0: int,
    donors: Sequence[str] | None = None,
    predictors: str | Sequence[str] = "outcome_path",
    outcome: str = "level",
) -> ScmProblem:
    """Assemble an :class:`ScmProblem` from a panel.

    ``treated`` may be a single city or a group (the group mean path is
    matched, and placebo sampling draws donor subsets of the same size).
    ``t0`` is the first treated year: years strictly before it are the
    pre-treatment window.  ``predictors="outcome_path"`` (default) matches
    the pre-period outcome path; otherwise pass covariate names, matched
    as pre-period means.
    """
    from .did import _outcome_matrix  # shared outcome conventions

    Y = _outcome_matrix(panel, outcome)
    years = np.asarray(panel.year_grid)
    pre_mask = years < t0
    if pre_mask.sum() < 1:
        raise TooFewPrePeriods(f"no pre-treatment years before {t0}")

    treated_ids = [treated] if isinstance(treated, str) else list(treated)
    treated_rows = [panel.city_index(c) for c in treated_ids]
    if donors is None:
        donor_ids = [c for c in panel.city_ids if c not in set(treated_ids)]
    else:
        donor_ids = [c for c in donors if c not in set(treated_ids)]
    donor_rows = [panel.city_index(c) for c in donor_ids]

    y_treated = Y[treated_rows].mean(axis=0)
    y_donors = Y[donor_rows]

    if isinstance(predictors, str) and predictors == "outcome_path":
        X1 = y_treated[pre_mask]
        X0 = y_donors[:, pre_mask].T
        names = [f"outcome_{int(y)}" for y in years[pre_mask]]
        is_path = True
    else:
        names = list(predictors)
        rows_t, rows_d = [], []
        for name in names:
            if name not in panel.covariates:
                raise ConfigError(f"unknown predictor {name!r}")
            series = panel.covariates[name]
            rows_t.append(series[treated_rows][:, pre_mask].mean())
            rows_d.append(series[donor_rows][:, pre_mask].mean(axis=1))
        X1 = np.asarray(rows_t)
        X0 = np.vstack(rows_d)
        is_path = False

    return ScmProblem(
        treated_id="+".join(treated_ids),
        donor_ids=donor_ids,
        predictor_names=names,
        predictors_treated=X1,
        predictors_donors=X0,
        years=years,
        pre_mask=pre_mask,
        y_treated=y_treated,
        y_donors=y_donors,
        predictors_are_path=is_path,
        group_size=len(treated_ids),
    )


# ---------------------------------------------------------------------------
# Simplex-constrained weighted least squares
# ---------------------------------------------------------------------------


def _restricted_simplex_ls(A, b, start):
    """Solve min ||b - A w||^2, sum w = 1, w >= 0, support limited to A's columns.

    NNLS-style active set: repeatedly solve the equality-constrained problem
    on the current support and walk back along the segment to the first
    coordinate hitting zero.
    """
    m = A.shape[1]
    active = np.ones(m, dtype=bool)
    w = start.copy()
    for _ in range(4 * m + 8):
        idx = np.nonzero(active)[0]
        As = A[:, idx]
        k = len(idx)
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = 2.0 * As.T @ As
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([2.0 * As.T @ b, [1.0]])
        try:
            sol = np.linalg.solve(kkt, rhs)[:k]
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
        if sol.min() >= -1e-12:
            out = np.zeros(m)
            out[idx] = np.maximum(sol, 0.0)
            out /= out.sum()
            return out
        # step from current point toward sol until the first coordinate hits 0
        cur = w[idx]
        diff = sol - cur
        bad = diff < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            steps = np.where(bad, cur / -diff, np.inf)
        theta = min(1.0, float(steps.min()))
        cur = cur + theta * diff
        w = np.zeros(m)
        w[idx] = np.maximum(cur, 0.0)
        active = w > 1e-14
        if not active.any():
            active[int(np.argmax(cur))] = True
    out = np.zeros(m)
    out[idx] = np.maximum(sol, 0.0)
    out /= out.sum()
    return out


def fit_weights(problem: ScmProblem, v: np.ndarray | None = None):
    """Donor weights minimising the V-weighted predictor discrepancy.

    Fully corrective Frank-Wolfe on the simplex: start from the best single
    donor, repeatedly add the steepest-descent vertex (ties to the lowest
    donor index) and re-solve exactly on the active support.  Stops when
    the objective improves by less than 1e-12 and the Frank-Wolfe gap is
    below the same tolerance.

    Returns
    -------
    (weights, objective, iterations)
    """
    k = len(problem.predictors_treated)
    if v is None:
        v = np.full(k, 1.0 / k)
    v = np.asarray(v, dtype=float).ravel()
    if v.shape != (k,) or np.any(v < 0):
        raise ConfigError("v must be a non-negative vector over predictors")
    if not np.any(v > 0):
        raise DegenerateV("all predictor weights are zero")

    sq = np.sqrt(v)
    A = problem.predictors_donors * sq[:, None]
    b = problem.predictors_treated * sq
    J = A.shape[1]

    vertex_obj = ((b[:, None] - A) ** 2).sum(axis=0)
    w = np.zeros(J)
    w[int(np.argmin(vertex_obj))] = 1.0  # argmin takes the first (lowest id) on ties
    obj = float(vertex_obj.min())

    it = 0
    for it in range(1, 10 * J + 50):
        grad = 2.0 * A.T @ (A @ w - b)
        s = int(np.argmin(grad))
        gap = float(grad @ w - grad[s])
        if gap <= QP_TOL:
            return w, obj, it
        support = w > 1e-14
        support[s] = True
        idx = np.nonzero(support)[0]
        w_new = np.zeros(J)
        w_new[idx] = _restricted_simplex_ls(A[:, idx], b, w[idx])
        r = b - A @ w_new
        new_obj = float(r @ r)
        if new_obj < obj - QP_TOL:
            w, obj = w_new, new_obj
        else:
            # the exact correction over support+steepest vertex cannot
            # improve further: converged
            if new_obj < obj:
                w, obj = w_new, new_obj
            return w, obj, it
    return w, obj, it


def select_v(
    problem: ScmProblem,
    n_starts: int = 20,
    seed: int = 0,
) -> np.ndarray:
    """Diagonal predictor weights chosen by chronological validation.

    The pre-treatment years are split in half chronologically; candidate
    weights are scored by the mean squared outcome gap over the validation
    (second) half of the synthetic unit fit with those weights.  The search
    runs Nelder-Mead from ``n_starts`` fixed seeds on a softmax
    parameterisation of the simplex.  When the predictors are the full
    pre-period outcome path the split would be circular, so uniform weights
    are returned; uniform is also the tie-break when no candidate improves
    on it.
    """
    k = len(problem.predictors_treated)
    uniform = np.full(k, 1.0 / k)
    if k == 1 or problem.predictors_are_path:
        return uniform

    pre_idx = np.nonzero(problem.pre_mask)[0]
    if len(pre_idx) < 2:
        raise TooFewPrePeriods("need at least two pre-treatment years to split")
    half = (len(pre_idx) + 1) // 2
    valid_idx = pre_idx[half:]

    y1 = problem.y_treated[valid_idx]
    Y0 = problem.y_donors[:, valid_idx]

    def mspe(z):
        z = np.asarray(z, dtype=float)
        ez = np.exp(z - z.max())
        v = ez / ez.sum()
        w, *_ = fit_weights(problem, v)
        gap = y1 - w @ Y0
        return float(gap @ gap) / len(valid_idx)

    base = mspe(np.zeros(k))
    best_val, best_v = base, uniform
    for s in range(n_starts):
        z0 = np.zeros(k) if s == 0 else make_rng(seed, s).normal(size=k)
        res = optimize.minimize(
            mspe, z0, method="Nelder-Mead",
            options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 200 * k},
        )
        if res.fun < best_val - 1e-12:
            ez = np.exp(res.x - res.x.max())
            best_val, best_v = float(res.fun), ez / ez.sum()
    if best_val >= base - 1e-12:
        return uniform
    return best_v


@dataclass
class ScmFit:
    """Weights, gaps and fit diagnostics for one synthetic-control run."""

    treated_id: str
    weights: pd.Series
    v: pd.Series
    gaps: pd.Series
    att: float
    pre_rmspe: float
    post_rmspe: float
    objective: float
    n_iterations: int

    @property
    def ratio(self) -> float:
        if self.pre_rmspe == 0.0:
            return math.inf if self.post_rmspe > 0.0 else math.nan
        return self.post_rmspe / self.pre_rmspe


def fit_scm(problem: ScmProblem, v: np.ndarray | None = None,
            n_starts: int = 20, seed: int = 0) -> ScmFit:
    """Full synthetic-control fit: select V (unless given), solve for weights,
    and report per-year gaps plus the mean post-period gap (the ATET)."""
    if v is None:
        v = select_v(problem, n_starts=n_starts, seed=seed)
    w, obj, iters = fit_weights(problem, v)
    synthetic = w @ problem.y_donors
    gaps = problem.y_treated - synthetic
    pre = gaps[problem.pre_mask]
    post = gaps[~problem.pre_mask]
    pre_rms = float(np.sqrt((pre ** 2).mean()))
    post_rms = float(np.sqrt((post ** 2).mean())) if post.size else math.nan
    # snap numerically exact fits to zero so ``ratio`` can tell a perfect
    # pre-period fit (ratio = inf) from a merely tight one
    tol = 1e-9 * max(float(np.sqrt((problem.y_treated ** 2).mean())), 1.0)
    pre_rms = 0.0 if pre_rms <= tol else pre_rms
    post_rms = 0.0 if post_rms <= tol else post_rms
    return ScmFit(
        treated_id=problem.treated_id,
        weights=pd.Series(w, index=problem.donor_ids),
        v=pd.Series(v, index=problem.predictor_names),
        gaps=pd.Series(gaps, index=list(problem.years)),
        att=float(post.mean()) if post.size else math.nan,
        pre_rmspe=pre_rms,
        post_rmspe=post_rms,
        objective=obj,
        n_iterations=iters,
    )


# ---------------------------------------------------------------------------
# Permutation inference
# ---------------------------------------------------------------------------


@dataclass
class PlaceboResult:
    """Permutation distribution of post/pre RMSPE ratios.

    ``p_overall`` ranks the treated ratio among the placebos
    (``rank / (n_placebos + 1)``); ``p_by_year`` ranks absolute post-period
    gaps year by year.
    """

    p_overall: float
    p_by_year: pd.Series
    treated_ratio: float
    placebo_ratios: np.ndarray
    n_placebos: int
    mode: str


def _subproblem(problem: ScmProblem, pseudo_y: np.ndarray, donor_rows: np.ndarray,
                label: str) -> ScmProblem:
    if problem.predictors_are_path:
        X1 = pseudo_y[problem.pre_mask]
        X0 = problem.y_donors[donor_rows][:, problem.pre_mask].T
    else:
        # covariate predictors: reuse donor predictor columns; the pseudo
        # treated unit inherits the mean of its member columns
        X0 = problem.predictors_donors[:, donor_rows]
        X1 = problem.predictors_donors[:, np.setdiff1d(np.arange(len(problem.donor_ids)), donor_rows)].mean(axis=1)
    return ScmProblem(
        treated_id=label,
        donor_ids=[problem.donor_ids[j] for j in donor_rows],
        predictor_names=problem.predictor_names,
        predictors_treated=X1,
        predictors_donors=X0,
        years=problem.years,
        pre_mask=problem.pre_mask,
        y_treated=pseudo_y,
        y_donors=problem.y_donors[donor_rows],
        predictors_are_path=problem.predictors_are_path,
        group_size=1,
    )


def placebo_inference(
    problem: ScmProblem,
    fit: ScmFit | None = None,
    mode: str = "in_space_full",
    n_samples: int = PLACEBO_CAP,
    seed: int = 0,
) -> PlaceboResult:
    """Rank the treated fit against placebo reassignments of treatment.

    ``in_space_full`` refits every donor as pseudo-treated against the
    remaining donors (the original treated unit never enters a placebo
    pool).  ``random_sample`` instead draws ``n_samples`` random donor
    subsets of the treated group's size and treats each subset mean as
    pseudo-treated — for group-level treatment where full enumeration is
    infeasible; ``n_samples`` is capped at 10,000.
    """
    if fit is None:
        fit = fit_scm(problem)
    J = len(problem.donor_ids)
    ratios = []
    gap_rows = []

    if mode == "in_space_full":
        draws = [np.array([j]) for j in range(J)]
    elif mode == "random_sample":
        n = min(int(n_samples), PLACEBO_CAP)
        size = min(problem.group_size, J - 2)
        if size < 1:
            raise ConfigError("donor pool too small for group placebos")
        draws = [
            make_rng(seed, i).choice(J, size=size, replace=False)
            for i in range(n)
        ]
    else:
        raise ConfigError(f"unknown placebo mode {mode!r}")

    all_rows = np.arange(J)
    for i, members in enumerate(draws):
        donor_rows = np.setdiff1d(all_rows, members)
        pseudo_y = problem.y_donors[members].mean(axis=0)
        sub = _subproblem(problem, pseudo_y, donor_rows, f"placebo_{i}")
        pfit = fit_scm(sub)
        ratios.append(pfit.ratio)
        gap_rows.append(pfit.gaps.to_numpy())

    ratios = np.asarray(ratios, dtype=float)
    finite_or_inf = ratios[~np.isnan(ratios)]
    treated_ratio = fit.ratio
    n_placebos = len(finite_or_inf)
    if math.isnan(treated_ratio):
        p_overall = math.nan
    else:
        rank = 1 + int((finite_or_inf >= treated_ratio).sum())
        p_overall = rank / (n_placebos + 1)

    post_years = problem.years[~problem.pre_mask]
    gap_mat = np.vstack(gap_rows)[:, ~problem.pre_mask]
    treated_gaps = fit.gaps.to_numpy()[~problem.pre_mask]
    p_by_year = {}
    for j, year in enumerate(post_years):
        p_by_year[int(year)] = (
            1 + int((np.abs(gap_mat[:, j]) >= abs(treated_gaps[j])).sum())
        ) / (len(draws) + 1)

    return PlaceboResult(
        p_overall=float(p_overall),
        p_by_year=pd.Series(p_by_year),
        treated_ratio=float(treated_ratio) if not math.isnan(treated_ratio) else math.nan,
        placebo_ratios=ratios,
        n_placebos=len(draws),
        mode=mode,
    )
