"""First-order panel vector autoregression with GMM estimation.

Unit fixed effects are removed by forward orthogonal deviations (the
Helmert transform), which keeps transformed innovations uncorrelated with
past levels, so untransformed lagged levels are valid instruments.  Each
equation is estimated by two-step GMM: an identity first-step weight, then
a weight built from unit-clustered first-step moment outer products.

Granger-style hypotheses reduce to Wald tests on single coefficients of
the transition matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError, SeriesTooShort, WeakInstruments
from .regression import WaldResult

_COND_LIMIT = 1e12


def helmert_transform(X: np.ndarray) -> np.ndarray:
    """Forward orthogonal deviations along the last axis.

    For a series ``x_1..x_T`` the transform is

        x*_t = sqrt((T - t) / (T - t + 1)) * (x_t - mean(x_{t+1}, .., x_T))

    defined for ``t = 1..T-1`` (the final observation has no future mean
    and is dropped), so the output has one fewer column.  Removes a unit
    fixed effect while keeping independent errors independent.
    """
    X = np.asarray(X, dtype=float)
    series = np.atleast_2d(X)
    n, t = series.shape
    if t < 2:
        raise SeriesTooShort("forward orthogonal deviations need T >= 2")
    out = np.empty((n, t - 1))
    for s in range(t - 1):
        future_mean = series[:, s + 1:].mean(axis=1)
        remaining = t - (s + 1)           # observations after period s+1
        scale = math.sqrt(remaining / (remaining + 1.0))
        out[:, s] = scale * (series[:, s] - future_mean)
    return out if X.ndim == 2 else out[0]


@dataclass
class PvarFit:
    """Two-step GMM estimates of a panel VAR(1).

    ``A[h, k]`` is the effect of variable ``k`` at ``t-1`` on variable
    ``h`` at ``t``; ``se`` matches element-wise.
    """

    variables: tuple[str, ...]
    A: pd.DataFrame
    se: pd.DataFrame
    vcov_blocks: dict[str, pd.DataFrame]
    n_units: int
    n_obs: int
    instrument_condition: float

    def tvalues(self) -> pd.DataFrame:
        return self.A / self.se

    def stable(self) -> bool:
        """Spectral radius of the transition matrix below one."""
        return bool(np.max(np.abs(np.linalg.eigvals(self.A.to_numpy()))) < 1.0)


def _two_step_gmm(y, X, Z, unit_ids):
    """Per-equation two-step GMM with unit-clustered second-step weight."""
    k = X.shape[1]
    m = Z.shape[1]
    zx = Z.T @ X
    zy = Z.T @ y
    cond = np.linalg.cond(zx)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise WeakInstruments(cond)

    # step 1: identity weight (equals plain IV when just-identified)
    if m == k:
        beta1 = np.linalg.solve(zx, zy)
    else:
        beta1 = np.linalg.solve(zx.T @ zx, zx.T @ zy)

    # step 2: clustered moment covariance from first-step residuals
    u1 = y - X @ beta1
    S = np.zeros((m, m))
    for uid in np.unique(unit_ids):
        rows = unit_ids == uid
        g_i = Z[rows].T @ u1[rows]
        S += np.outer(g_i, g_i)
    cond_s = np.linalg.cond(S)
    if not np.isfinite(cond_s) or cond_s > _COND_LIMIT:
        raise WeakInstruments(cond_s)
    w2 = np.linalg.inv(S)
    G = zx
    bread = np.linalg.inv(G.T @ w2 @ G)
    beta2 = bread @ (G.T @ w2 @ zy)

    # clustered sandwich at the second-step estimate
    u2 = y - X @ beta2
    S2 = np.zeros((m, m))
    for uid in np.unique(unit_ids):
        rows = unit_ids == uid
        g_i = Z[rows].T @ u2[rows]
        S2 += np.outer(g_i, g_i)
    meat = G.T @ w2 @ S2 @ w2 @ G
    vcov = bread @ meat @ bread
    return beta2, vcov, max(cond, cond_s)


def pvar1_fit(data: pd.DataFrame, variables, unit_col: str = "city_id",
              time_col: str = "year") -> PvarFit:
    """Fit a VAR(1) on a long panel.

    ``data`` must be a balanced long panel with one row per unit-period.
    Each equation regresses the Helmert-transformed variable on the
    Helmert-transformed lags of all variables, instrumented by the
    untransformed lagged levels.
    """
    variables = tuple(variables)
    if len(variables) < 1:
        raise ConfigError("need at least one variable")
    wide = {}
    piv = data.pivot_table(index=unit_col, columns=time_col, sort=True)
    for v in variables:
        if v not in data.columns:
            raise ConfigError(f"variable {v!r} not in data")
        wide[v] = piv[v].to_numpy(dtype=float)
    n, t = next(iter(wide.values())).shape
    if t < 4:
        raise SeriesTooShort(
            f"panel VAR needs at least 4 periods per unit, got {t}"
        )
    if any(not np.isfinite(w).all() for w in wide.values()):
        raise ConfigError("panel is unbalanced or contains missing values")

    # Transformed outcome/regressor pairs: x*_t on y*_{t-1} for t = 2..T-1
    # (the transform runs t = 1..T-1; the lag drops the first usable column).
    star = {v: helmert_transform(w) for v, w in wide.items()}
    y_cols = slice(1, t - 1)       # transformed periods 2..T-1
    x_cols = slice(0, t - 2)       # transformed lags 1..T-2
    z_cols = slice(0, t - 2)       # levels at 1..T-2 instrument the lags

    unit_ids = np.repeat(np.arange(n), t - 2)
    X = np.column_stack([star[v][:, x_cols].ravel() for v in variables])
    Z = np.column_stack([wide[v][:, z_cols].ravel() for v in variables])

    K = len(variables)
    A = np.empty((K, K))
    se = np.empty((K, K))
    blocks = {}
    worst_cond = 0.0
    for h, v in enumerate(variables):
        y = star[v][:, y_cols].ravel()
        beta, vcov, cond = _two_step_gmm(y, X, Z, unit_ids)
        A[h] = beta
        se[h] = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
        blocks[v] = pd.DataFrame(vcov, index=variables, columns=variables)
        worst_cond = max(worst_cond, cond)

    idx = pd.Index(variables)
    return PvarFit(
        variables=variables,
        A=pd.DataFrame(A, index=idx, columns=idx),
        se=pd.DataFrame(se, index=idx, columns=idx),
        vcov_blocks=blocks,
        n_units=n,
        n_obs=int(n * (t - 2)),
        instrument_condition=float(worst_cond),
    )


def granger_wald(fit: PvarFit, cause: str, effect: str) -> WaldResult:
    """Wald test that ``cause`` does not Granger-cause ``effect``.

    In a VAR(1) this is a single restriction: ``A[effect, cause] = 0``.
    """
    if cause not in fit.variables or effect not in fit.variables:
        raise ConfigError("cause/effect must be fitted variables")
    a = float(fit.A.loc[effect, cause])
    v = float(fit.vcov_blocks[effect].loc[cause, cause])
    stat = a * a / v
    p = float(stats.chi2.sf(stat, df=1))
    return WaldResult(statistic=float(stat), df=1, pvalue=p)
