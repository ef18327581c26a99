"""Generalized synthetic control via interactive fixed effects.

Control cities identify a factor model

    Y_it = c_i + g_t + theta_t' Z_i + pi_t' mu_i + e_it

estimated by alternating least squares (additive effects and covariate
slopes given factors; factors from the leading principal directions of the
residual).  Treated cities get loadings projected from their pre-treatment
years, and the treatment effect is the gap between observed and predicted
outcomes on treated cells.

With ``r = 0`` and no covariates the procedure collapses to two-way
fixed-effects imputation on untreated cells and matches
:func:`citypanel.did.imputation_att` exactly.

The factor count can be chosen by leave-one-out cross-validation over
pre-treatment years (:func:`cross_validate_r`); uncertainty comes from a
bootstrap that resamples control cities and redraws treated residuals from
their pre-period empirical distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    EstimatorError,
    NoTreatedUnits,
    RankDeficient,
    TooFewPrePeriods,
)
from .panel import BalancedPanel, TreatmentSchedule
from .rng import make_rng

FACTOR_TOL = 1e-8
FACTOR_MAX_ITER = 1000


@dataclass
class FactorModel:
    """Estimated interactive fixed-effects decomposition.

    ``factors`` is ``(T, r)`` normalised so ``factors' factors / T = I``;
    ``loadings`` is ``(N, r)``.  ``fitted`` reconstructs
    ``unit_effects + time_effects + Z theta' + loadings factors'``.
    """

    r: int
    factors: np.ndarray
    loadings: np.ndarray
    time_effects: np.ndarray
    unit_effects: np.ndarray
    theta: np.ndarray | None
    residuals: np.ndarray
    sigma2: float
    converged: bool
    n_iter: int

    @property
    def fitted(self) -> np.ndarray:
        return (
            self.unit_effects[:, None]
            + self.time_effects[None, :]
            + (0.0 if self.theta is None else self._z @ self.theta.T)
            + self.loadings @ self.factors.T
        )

    _z: np.ndarray | None = None


def _fix_signs(factors, loadings):
    """Flip factor signs so the largest-magnitude entry is positive.

    Makes the SVD-based decomposition unique, hence runs reproducible.
    """
    for f in range(factors.shape[1]):
        col = factors[:, f]
        pivot = int(np.argmax(np.abs(col)))
        if col[pivot] < 0:
            factors[:, f] = -col
            loadings[:, f] = -loadings[:, f]
    return factors, loadings


def fit_factor_model(
    Y: np.ndarray,
    r: int,
    Z: np.ndarray | None = None,
    two_way: bool = True,
    tol: float = FACTOR_TOL,
    max_iter: int = FACTOR_MAX_ITER,
) -> FactorModel:
    """Alternating least squares for the interactive fixed-effects model.

    Parameters
    ----------
    Y : (N, T) array
        Outcomes for the estimation block (typically control cities).
    r : int
        Number of latent factors; ``r = 0`` fits only the additive part.
    Z : (N, p) array, optional
        Time-invariant unit covariates with period-specific slopes.
    two_way : bool
        Include additive unit and time effects (default).  Disable when the
        input is already residualised.

    The iteration alternates exact least-squares updates and stops when the
    fitted matrix changes by less than ``tol`` (sup norm); exceeding
    ``max_iter`` returns the best iterate flagged ``converged=False``.
    """
    Y = np.asarray(Y, dtype=float)
    n, t = Y.shape
    if r < 0 or r > min(n, t):
        raise ConfigError(f"factor count r={r} outside [0, min(N, T)]")
    if Z is not None:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise RankDeficient(
                [f"Z[:, {j}]" for j in range(Z.shape[1])],
                "unit covariates are collinear",
            )

    c = np.zeros(n)
    g = np.zeros(t)
    theta = np.zeros((t, Z.shape[1])) if Z is not None else None
    factors = np.zeros((t, max(r, 1)))[:, :r]
    loadings = np.zeros((n, max(r, 1)))[:, :r]

    if Z is None:
        # Without unit covariates the least-squares problem separates: the
        # double-demeaned outcome is orthogonal to the additive part, and
        # its rank-r truncation has zero row/column means, so sweeping the
        # means once and taking a single SVD is the exact global optimum.
        S = Y
        if two_way:
            c = Y.mean(axis=1)
            g = (Y - c[:, None]).mean(axis=0)
            S = Y - c[:, None] - g[None, :]
        if r > 0:
            u, d, vt = np.linalg.svd(S, full_matrices=False)
            factors = math.sqrt(t) * vt[:r].T
            loadings = S @ factors / t
            factors, loadings = _fix_signs(factors, loadings)
        fitted = c[:, None] + g[None, :] + loadings @ factors.T
        return _finish_factor_model(
            Y, r, Z, factors, loadings, c, g, None, fitted,
            converged=True, n_iter=1, two_way=two_way,
        )

    zzt_inv = np.linalg.inv(Z.T @ Z)

    prev_fit = np.zeros_like(Y)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        F = loadings @ factors.T
        zpart = Z @ theta.T if Z is not None else 0.0
        if two_way:
            M = Y - zpart - F
            c = M.mean(axis=1)
            g = (M - c[:, None]).mean(axis=0)
        if Z is not None:
            R = Y - c[:, None] - g[None, :] - F
            theta = (zzt_inv @ (Z.T @ R)).T
            zpart = Z @ theta.T
        if r > 0:
            S = Y - c[:, None] - g[None, :] - zpart
            # leading principal directions of the residual
            u, d, vt = np.linalg.svd(S, full_matrices=False)
            factors = math.sqrt(t) * vt[:r].T
            loadings = S @ factors / t
            factors, loadings = _fix_signs(factors, loadings)
            F = loadings @ factors.T
        fitted = c[:, None] + g[None, :] + (zpart if Z is not None else 0.0) + F
        if np.abs(fitted - prev_fit).max() < tol:
            converged = True
            break
        prev_fit = fitted

    return _finish_factor_model(
        Y, r, Z, factors, loadings, c, g, theta, fitted,
        converged=converged, n_iter=it, two_way=two_way,
    )


def _finish_factor_model(Y, r, Z, factors, loadings, c, g, theta, fitted,
                         converged, n_iter, two_way):
    n, t = Y.shape
    residuals = Y - fitted
    n_params = r * (n + t) + (n + t if two_way else 0) + (
        theta.size if theta is not None else 0
    )
    dof = max(n * t - n_params, 1)
    model = FactorModel(
        r=r,
        factors=factors,
        loadings=loadings,
        time_effects=g,
        unit_effects=c,
        theta=theta,
        residuals=residuals,
        sigma2=float((residuals ** 2).sum()) / dof,
        converged=converged,
        n_iter=n_iter,
    )
    model._z = Z
    return model


# ---------------------------------------------------------------------------
# Treated-unit projection and the ATT pipeline
# ---------------------------------------------------------------------------


def _project_treated(model: FactorModel, y_row: np.ndarray, z_row, pre_idx):
    """Intercept and loadings for a treated city from its pre years.

    Regresses the pre-period residual (after control time effects and the
    covariate part) on ``[1, factors]``; returns the full predicted path.
    """
    t = len(y_row)
    resid = y_row - model.time_effects
    if model.theta is not None:
        resid = resid - model.theta @ z_row
    X_pre = np.column_stack([np.ones(len(pre_idx)), model.factors[pre_idx]])
    if X_pre.shape[0] < X_pre.shape[1]:
        raise TooFewPrePeriods(
            f"{X_pre.shape[0]} pre years cannot identify {X_pre.shape[1] - 1} "
            "loadings plus an intercept"
        )
    coef, *_ = np.linalg.lstsq(X_pre, resid[pre_idx], rcond=None)
    X_all = np.column_stack([np.ones(t), model.factors])
    pred = model.time_effects + X_all @ coef
    if model.theta is not None:
        pred = pred + model.theta @ z_row
    return pred


def _impute_two_way(Y, untreated_mask):
    """Two-way fixed-effects fit on untreated cells (for the r=0 path)."""
    from .did import _two_way_predict

    fitted, ok_i, ok_t = _two_way_predict(Y, untreated_mask)
    return fitted, ok_i, ok_t


@dataclass
class GsynthResult:
    """Per-year and overall treatment effects with bootstrap uncertainty."""

    overall: float
    overall_se: float
    ci_lower: float
    ci_upper: float
    att_by_year: pd.Series
    att_by_year_se: pd.Series
    r: int
    cv_mspe: pd.Series | None
    n_treated: int
    n_controls: int
    n_boot: int
    seed: int
    converged: bool
    flags: list[str] = field(default_factory=list)

    @property
    def percent_effect(self) -> float:
        return float(np.expm1(self.overall))


def _att_once(Y, Z, treated_rows, control_rows, onset, r):
    """One pass of the estimator; returns (tau matrix, converged)."""
    n, t = Y.shape
    tau = np.full((n, t), np.nan)
    if r == 0 and Z is None:
        untreated = ~onset
        fitted, ok_i, ok_t = _impute_two_way(Y, untreated)
        gap = Y - fitted
        for i in treated_rows:
            for j in range(t):
                if onset[i, j] and np.isfinite(gap[i, j]):
                    tau[i, j] = gap[i, j]
        return tau, True

    model = fit_factor_model(
        Y[control_rows], r, Z=Z[control_rows] if Z is not None else None,
        two_way=True,
    )
    for i in treated_rows:
        pre_idx = np.nonzero(~onset[i])[0]
        pred = _project_treated(
            model, Y[i], Z[i] if Z is not None else None, pre_idx
        )
        gap = Y[i] - pred
        tau[i, onset[i]] = gap[onset[i]]
    return tau, model.converged


def cross_validate_r(
    Y: np.ndarray,
    Z: np.ndarray | None,
    treated_rows: Sequence[int],
    control_rows: Sequence[int],
    onset: np.ndarray,
    r_max: int = 5,
) -> pd.Series:
    """Held-out pre-year MSPE for each candidate factor count.

    For every ``r`` the control model is fit once; each treated city's
    loadings are then re-projected with one pre-treatment year left out and
    that year predicted.  Returns the MSPE per ``r`` (index 0..r_max);
    choose the argmin, ties to the smaller ``r``.
    """
    pre_counts = [int((~onset[i]).sum()) for i in treated_rows]
    if min(pre_counts) < 3:
        raise TooFewPrePeriods(
            "leave-one-out selection needs at least three pre-treatment years"
        )
    r_cap = min(r_max, min(pre_counts) - 2, len(control_rows) - 1)
    mspe = {}
    for r in range(0, r_cap + 1):
        model = fit_factor_model(
            Y[list(control_rows)], r,
            Z=Z[list(control_rows)] if Z is not None else None,
            two_way=True,
        )
        errors = []
        for i in treated_rows:
            pre_idx = np.nonzero(~onset[i])[0]
            for s in pre_idx:
                rest = pre_idx[pre_idx != s]
                if len(rest) < r + 1:
                    continue
                pred = _project_treated(
                    model, Y[i], Z[i] if Z is not None else None, rest
                )
                errors.append(Y[i, s] - pred[s])
        mspe[r] = float(np.mean(np.square(errors))) if errors else math.inf
    return pd.Series(mspe, name="mspe")


def gsynth_att(
    panel: BalancedPanel,
    schedule: TreatmentSchedule,
    r: int | str = "auto",
    r_max: int = 5,
    covariates: Sequence[str] | None = None,
    outcome: str = "log",
    n_boot: int = 1000,
    seed: int = 0,
) -> GsynthResult:
    """Generalized synthetic control ATT for the treated cities.

    ``r="auto"`` selects the factor count by :func:`cross_validate_r`.
    Covariates (panel covariate names) enter as time-invariant unit
    characteristics — their pre-period means — with period-specific
    slopes.  Bootstrap uncertainty resamples control cities with
    replacement and redraws each treated city's residuals from its own
    pre-period residual pool.
    """
    from .did import _outcome_matrix

    Y = _outcome_matrix(panel, outcome)
    G = schedule.cohort
    if not np.isfinite(G).any():
        raise NoTreatedUnits("schedule has no treated city")
    years = np.asarray(panel.year_grid, dtype=float)
    onset = years[None, :] >= G[:, None]
    treated_rows = list(np.nonzero(np.isfinite(G))[0])
    control_rows = list(np.nonzero(~np.isfinite(G))[0])
    if len(control_rows) < 2:
        raise EstimatorError("need at least two never-treated control cities")

    Z = None
    if covariates:
        cols = []
        for name in covariates:
            if name not in panel.covariates:
                raise ConfigError(f"unknown covariate {name!r}")
            values = panel.covariates[name]
            pre_mean = np.array(
                [values[i, ~onset[i]].mean() if (~onset[i]).any() else values[i].mean()
                 for i in range(panel.n_cities)]
            )
            cols.append(pre_mean)
        Z = np.column_stack(cols)

    cv = None
    flags: list[str] = []
    if r == "auto":
        cv = cross_validate_r(Y, Z, treated_rows, control_rows, onset, r_max)
        r_used = int(cv.idxmin())  # index order 0..r_max: ties go to smaller r
    else:
        r_used = int(r)

    tau, converged = _att_once(Y, Z, treated_rows, control_rows, onset, r_used)
    if not converged:
        flags.append("factor_fit_not_converged")

    mask = np.isfinite(tau)
    if not mask.any():
        raise EstimatorError("no treated cell produced an effect estimate")
    overall = float(tau[mask].mean())
    post_years = sorted({int(years[j]) for _, j in np.argwhere(mask)})
    att_by_year = pd.Series(
        {y: float(tau[:, list(years).index(y)][mask[:, list(years).index(y)]].mean())
         for y in post_years}
    )

    # -- bootstrap: resample controls, redraw treated pre residuals --------
    overall_draws = []
    year_draws: dict[int, list] = {y: [] for y in post_years}
    if n_boot > 0:
        # systematic treated path: counterfactual everywhere, plus the
        # estimated overall effect on post cells
        systematic = Y.copy()
        pre_resid = {}
        if r_used == 0 and Z is None:
            fitted0, _, _ = _impute_two_way(Y, ~onset)
        else:
            model0 = fit_factor_model(
                Y[control_rows], r_used,
                Z=Z[control_rows] if Z is not None else None,
            )
        for i in treated_rows:
            pre_idx = np.nonzero(~onset[i])[0]
            path = Y[i].copy()
            tau_i = np.where(np.isfinite(tau[i]), tau[i], overall)
            path[onset[i]] = Y[i][onset[i]] - tau_i[onset[i]] + overall
            systematic[i] = path
            # pre-period fit residuals feed the parametric redraw
            if r_used == 0 and Z is None:
                res = Y[i, pre_idx] - fitted0[i, pre_idx]
                pre_resid[i] = res[np.isfinite(res)]
            else:
                pred0 = _project_treated(
                    model0, Y[i], Z[i] if Z is not None else None, pre_idx
                )
                pre_resid[i] = Y[i, pre_idx] - pred0[pre_idx]

        n_co = len(control_rows)
        control_arr = np.asarray(control_rows)
        for b in range(n_boot):
            rng = make_rng(seed, b)
            co_idx = control_arr[rng.integers(0, n_co, size=n_co)]
            Yb_rows = []
            Zb_rows = [] if Z is not None else None
            onset_b = []
            for i in treated_rows:
                pool = pre_resid[i]
                noise = pool[rng.integers(0, len(pool), size=Y.shape[1])] if len(pool) else 0.0
                Yb_rows.append(systematic[i] + noise)
                onset_b.append(onset[i])
                if Z is not None:
                    Zb_rows.append(Z[i])
            for ci in co_idx:
                Yb_rows.append(Y[ci])
                onset_b.append(onset[ci])
                if Z is not None:
                    Zb_rows.append(Z[ci])
            Yb = np.vstack(Yb_rows)
            onset_mat = np.vstack(onset_b)
            Zb = np.vstack(Zb_rows) if Z is not None else None
            tr_b = list(range(len(treated_rows)))
            co_b = list(range(len(treated_rows), len(Yb_rows)))
            try:
                tau_b, _ = _att_once(Yb, Zb, tr_b, co_b, onset_mat, r_used)
            except (EstimatorError, np.linalg.LinAlgError):
                continue
            m_b = np.isfinite(tau_b)
            if not m_b.any():
                continue
            overall_draws.append(float(tau_b[m_b].mean()))
            for y in post_years:
                j = list(years).index(y)
                col = tau_b[:, j][m_b[:, j]]
                if col.size:
                    year_draws[y].append(float(col.mean()))

    def sd(vals):
        arr = np.asarray(vals, dtype=float)
        return float(arr.std(ddof=1)) if arr.size > 1 else math.nan

    if overall_draws:
        lo, hi = np.percentile(overall_draws, [2.5, 97.5])
    else:
        lo = hi = math.nan
    return GsynthResult(
        overall=overall,
        overall_se=sd(overall_draws),
        ci_lower=float(lo),
        ci_upper=float(hi),
        att_by_year=att_by_year,
        att_by_year_se=pd.Series({y: sd(v) for y, v in year_draws.items()}),
        r=r_used,
        cv_mspe=cv,
        n_treated=len(treated_rows),
        n_controls=len(control_rows),
        n_boot=n_boot,
        seed=seed,
        converged=converged,
        flags=flags,
    )
