"""Shared estimation kernel: fixed-effects OLS with multiway clustering.

All panel estimators in the package sit on top of three primitives:

* :func:`within_transform` — alternating within-group demeaning that
  absorbs high-dimensional fixed effects without building dummies;
* :func:`ols_fit` — OLS on the demeaned data with rank diagnostics;
* :func:`cgm_vcov` — two-way cluster-robust variance via the
  inclusion-exclusion of one-way clustered "meat" matrices.

A small Newton logit (:func:`logit_fit`) supports propensity-score
estimators, and :func:`wald_test` provides joint chi-square restrictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import (
    ConfigError,
    EstimatorError,
    NonConvergence,
    NoVariation,
    RankDeficient,
    Separation,
    SingleCluster,
    SingularRVR,
)

DEMEAN_TOL = 1e-10
MAX_SWEEPS = 10_000


@dataclass
class DesignSpec:
    """Declarative description of a fixed-effects regression.

    Parameters
    ----------
    outcome : str
        Column name of the dependent variable.
    regressors : sequence of str
        Columns entering the linear index.  No intercept is added; absorb a
        dimension or include a constant column explicitly.
    absorb : sequence of str
        Categorical columns whose fixed effects are swept out by
        within-transformation (e.g. ``("city_id", "year")``).
    cluster : sequence of str
        Dimensions for multiway cluster-robust standard errors (one or two).
    weights : str, optional
        Column of non-negative per-row weights.
    """

    outcome: str
    regressors: Sequence[str]
    absorb: Sequence[str] = ()
    cluster: Sequence[str] = ()
    weights: str | None = None

    def __post_init__(self):
        self.regressors = list(self.regressors)
        self.absorb = tuple(self.absorb)
        self.cluster = tuple(self.cluster)
        if not self.regressors:
            raise ConfigError("DesignSpec needs at least one regressor")
        if len(self.cluster) > 2:
            raise ConfigError("at most two cluster dimensions are supported")


def _group_codes(values) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(np.asarray(values), sort=True)
    return codes.astype(np.intp), len(uniques)


def within_transform(
    data: pd.DataFrame,
    absorb: Sequence[str],
    columns: Sequence[str] | None = None,
    weights: np.ndarray | None = None,
    tol: float = DEMEAN_TOL,
    max_sweeps: int = MAX_SWEEPS,
    return_sweeps: bool = False,
):
    """Demean columns within each absorbed dimension, iterating to a fixpoint.

    Alternating projections: each sweep subtracts group means along every
    absorb dimension in turn, until the largest subtracted mean in a full
    sweep falls below ``tol``.  A single dimension finishes in one
    subtracting sweep; a balanced two-way panel in two.

    Returns the demeaned copy (only ``columns``, by default every column not
    used as an absorb dimension), plus the sweep count when
    ``return_sweeps`` is true.
    """
    absorb = tuple(absorb)
    if columns is None:
        columns = [c for c in data.columns if c not in absorb]
    values = data[list(columns)].to_numpy(dtype=float, copy=True)
    if not absorb:
        out = pd.DataFrame(values, columns=list(columns), index=data.index)
        return (out, 0) if return_sweeps else out

    codes_list = [_group_codes(data[dim]) for dim in absorb]
    sweeps = _demean_inplace(values, codes_list, weights, tol, max_sweeps)
    out = pd.DataFrame(values, columns=list(columns), index=data.index)
    return (out, sweeps) if return_sweeps else out


def _demean_inplace(values, codes_list, weights, tol, max_sweeps) -> int:
    """Alternating demeaning on a 2-D float array; returns sweeps used."""
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        delta = 0.0
        for codes, n_groups in codes_list:
            if weights is None:
                counts = np.bincount(codes, minlength=n_groups).astype(float)
                sums = np.zeros((n_groups, values.shape[1]))
                np.add.at(sums, codes, values)
                means = sums / counts[:, None]
            else:
                wsum = np.bincount(codes, weights=weights, minlength=n_groups)
                sums = np.zeros((n_groups, values.shape[1]))
                np.add.at(sums, codes, values * weights[:, None])
                means = sums / wsum[:, None]
            values -= means[codes]
            if means.size:
                delta = max(delta, float(np.abs(means).max()))
        if delta < tol:
            break
    else:
        raise NonConvergence(
            f"within transform did not converge in {max_sweeps} sweeps"
        )
    return sweeps


@dataclass
class FitResult:
    """Coefficients, variance and diagnostics from :func:`ols_fit`.

    ``params``/``se``/``vcov`` are indexed by regressor name.  ``flags``
    collects non-fatal diagnostics such as ``"vcov_floored"`` (a negative
    eigenvalue of the clustered variance was floored at zero) and dropped
    collinear columns are listed in ``dropped``.
    """

    params: pd.Series
    se: pd.Series
    vcov: pd.DataFrame
    residuals: np.ndarray
    fitted: np.ndarray
    n_obs: int
    dof: int
    sweeps: int
    cluster_counts: dict[str, int]
    absorbed_sizes: dict[str, int]
    dropped: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    # retained for re-clustering and Wald tests
    design_matrix: np.ndarray | None = None
    bread: np.ndarray | None = None
    cluster_labels: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def tvalues(self) -> pd.Series:
        return self.params / self.se

    @property
    def _reference_dof(self) -> float | None:
        """Degrees of freedom for t-based inference on clustered fits.

        With few clusters the plug-in variance is noisy, so clustered
        p-values and intervals use Student's t with ``min(G) - 1`` degrees
        of freedom (the usual guard when the smallest clustering dimension
        is thin).  Unclustered fits return None and use the normal
        reference.
        """
        if self.cluster_counts:
            return float(min(self.cluster_counts.values()) - 1)
        return None

    @property
    def pvalues(self) -> pd.Series:
        z = np.abs(self.params / self.se)
        g = self._reference_dof
        p = 2.0 * (stats.t.sf(z, g) if g else stats.norm.sf(z))
        return pd.Series(p, index=self.params.index)

    def conf_int(self, level: float = 0.95) -> pd.DataFrame:
        g = self._reference_dof
        q = 0.5 + level / 2.0
        z = stats.t.ppf(q, g) if g else stats.norm.ppf(q)
        return pd.DataFrame(
            {"lower": self.params - z * self.se, "upper": self.params + z * self.se}
        )

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "coef": self.params,
                "se": self.se,
                "t": self.tvalues,
                "p": self.pvalues,
            }
        )

    def classical_vcov(self) -> pd.DataFrame:
        """Homoskedastic variance ``s^2 (X'X)^{-1}`` of the same fit.

        Available regardless of the clustering used for ``vcov``; joint
        tests on sparse indicator blocks (e.g. event-time leads) use this,
        since score mass concentrated in a handful of clusters makes the
        clustered joint variance badly behaved.
        """
        if self.bread is None:
            raise EstimatorError("fit was built without retained design info")
        s2 = float(self.residuals @ self.residuals) / self.dof
        names = self.params.index
        return pd.DataFrame(s2 * self.bread, index=names, columns=names)


def _annihilated(original: np.ndarray, demeaned: np.ndarray) -> np.ndarray:
    """Columns whose within variation is numerically zero."""
    scale = np.maximum(np.abs(original).max(axis=0), 1.0)
    return np.abs(demeaned).max(axis=0) <= 1e-8 * scale


def _first_independent(X: np.ndarray, tol: float) -> list[int]:
    """Indices of a maximal linearly independent column set.

    Earlier columns win ties, so a regressor listed first is never dropped
    in favour of a later duplicate — callers order the coefficient of
    interest ahead of controls and rely on this.
    """
    keep: list[int] = []
    basis = np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        col = X[:, j]
        if keep:
            # two projection passes for numerical orthogonality
            col = col - basis @ (basis.T @ col)
            col = col - basis @ (basis.T @ col)
        norm = np.linalg.norm(col)
        if norm > tol:
            keep.append(j)
            basis = np.hstack([basis, (col / norm)[:, None]])
    return keep


def ols_fit(
    spec: DesignSpec,
    data: pd.DataFrame,
    drop_collinear: bool = False,
) -> FitResult:
    """Fixed-effects OLS with optional multiway-clustered standard errors.

    The absorbed dimensions are swept out by :func:`within_transform`; the
    slope coefficients then equal the full dummy-variable regression
    (Frisch-Waugh).  Degrees of freedom charge one parameter per absorbed
    group, less one per additional dimension (shared constant).

    Parameters
    ----------
    drop_collinear : bool
        When false (default), regressors without within variation raise
        :class:`NoVariation` and collinear sets raise
        :class:`RankDeficient`.  When true, offending columns are dropped
        and recorded in ``FitResult.dropped`` — convenient for saturated
        interaction designs where lower-order terms may be absorbed.
    """
    missing = [
        c
        for c in [spec.outcome, *spec.regressors, *spec.absorb, *spec.cluster]
        if c not in data.columns
    ]
    if missing:
        raise ConfigError(f"columns missing from data: {missing}")

    weights = None
    if spec.weights is not None:
        weights = data[spec.weights].to_numpy(dtype=float)
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ConfigError("weights must be finite and non-negative")

    cols = [spec.outcome, *spec.regressors]
    raw = data[cols].to_numpy(dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ConfigError("outcome/regressors contain non-finite values")

    demeaned, sweeps = within_transform(
        data, spec.absorb, cols, weights=weights, return_sweeps=True
    )
    yd = demeaned[spec.outcome].to_numpy()
    Xd = demeaned[spec.regressors].to_numpy()
    names = list(spec.regressors)
    dropped: list[str] = []

    if spec.absorb:
        dead = _annihilated(raw[:, 1:], Xd)
        if dead.any():
            bad = [n for n, d in zip(names, dead) if d]
            if not drop_collinear:
                raise NoVariation(bad)
            keep = ~dead
            Xd, names = Xd[:, keep], [n for n, k in zip(names, keep) if k]
            dropped.extend(bad)
            if not names:
                raise NoVariation(bad, "all regressors absorbed by fixed effects")

    if weights is not None:
        sw = np.sqrt(weights)
        yd = yd * sw
        Xd = Xd * sw[:, None]

    # rank screen via pivoted QR; dependent columns are the trailing pivots
    q, r, piv = linalg.qr(Xd, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank_tol = diag[0] * max(Xd.shape) * np.finfo(float).eps * 10 if diag.size else 0.0
    rank = int((diag > rank_tol).sum())
    if rank < len(names):
        if not drop_collinear:
            raise RankDeficient([names[p] for p in piv[rank:]])
        keep_idx = _first_independent(Xd, rank_tol)
        dropped.extend(n for i, n in enumerate(names) if i not in keep_idx)
        Xd = Xd[:, keep_idx]
        names = [names[i] for i in keep_idx]

    n = Xd.shape[0]
    xtx = Xd.T @ Xd
    bread = np.linalg.inv(xtx)
    beta = bread @ (Xd.T @ yd)
    resid = yd - Xd @ beta

    absorbed_sizes = {dim: _group_codes(data[dim])[1] for dim in spec.absorb}
    absorbed_df = 0
    if spec.absorb:
        absorbed_df = sum(absorbed_sizes.values()) - (len(spec.absorb) - 1)
    dof = n - len(names) - absorbed_df
    if dof <= 0:
        raise RankDeficient(names, f"non-positive residual dof ({dof})")

    cluster_labels = {
        dim: data[dim].to_numpy() for dim in dict.fromkeys(spec.cluster)
    }
    fit = FitResult(
        params=pd.Series(beta, index=names),
        se=pd.Series(np.nan, index=names),
        vcov=pd.DataFrame(np.nan, index=names, columns=names),
        residuals=resid,
        fitted=yd - resid,
        n_obs=n,
        dof=dof,
        sweeps=sweeps,
        cluster_counts={},
        absorbed_sizes=absorbed_sizes,
        dropped=dropped,
        design_matrix=Xd,
        bread=bread,
        cluster_labels=cluster_labels,
    )

    if spec.cluster:
        cgm = cgm_vcov(fit, spec.cluster)
        V = cgm.vcov
        fit.cluster_counts = dict(cgm.cluster_counts)
        fit.flags.extend(cgm.flags)
    else:
        sigma2 = float(resid @ resid) / dof
        V = sigma2 * bread
    fit.vcov = pd.DataFrame(V, index=names, columns=names)
    fit.se = pd.Series(np.sqrt(np.maximum(np.diag(V), 0.0)), index=names)
    return fit


@dataclass
class CgmResult:
    """Clustered variance with its inclusion-exclusion components.

    ``vcov`` is the positive-semidefinite (eigenvalue-floored) matrix used
    for inference; ``raw_vcov`` the uncorrected sum, kept for diagnostics
    and oracle comparisons.
    """

    vcov: np.ndarray
    raw_vcov: np.ndarray
    components: dict[str, np.ndarray]
    cluster_counts: dict[str, int]
    flags: list[str]


def _meat(Xd: np.ndarray, resid: np.ndarray, codes: np.ndarray, n_groups: int):
    scores = Xd * resid[:, None]
    sums = np.zeros((n_groups, Xd.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums


def cgm_vcov(fit: FitResult, cluster_dims: Sequence[str]) -> CgmResult:
    """Multiway cluster-robust variance by inclusion-exclusion.

    With dimensions ``a`` and ``b``::

        V = V_a + V_b - V_{a∩b}

    where each one-way piece is a sandwich on cluster-summed scores with
    the finite-sample factor ``G/(G-1) * (n-1)/(n-k)``.  Negative
    eigenvalues of the combined matrix (possible because of the
    subtraction) are floored at zero and flagged.
    """
    dims = tuple(cluster_dims)
    if not 1 <= len(dims) <= 2:
        raise ConfigError("cgm_vcov supports one or two cluster dimensions")
    if fit.design_matrix is None:
        raise ConfigError("fit does not retain per-row scores")
    for d in dims:
        if d not in fit.cluster_labels:
            raise ConfigError(f"fit did not store cluster labels for {d!r}")

    Xd, resid = fit.design_matrix, fit.residuals
    n, k_kept = Xd.shape
    n_minus_k = fit.dof  # n - regressors - absorbed parameters

    label_arrays = [fit.cluster_labels[d] for d in dims]
    pieces: list[tuple[str, np.ndarray, int, float]] = []
    counts: dict[str, int] = {}
    for d, labels in zip(dims, label_arrays):
        codes, G = _group_codes(labels)
        if G < 2:
            raise SingleCluster(f"cluster dimension {d!r} has a single cluster")
        counts[d] = G
        pieces.append((d, codes, G, +1.0))
    if len(dims) == 2:
        pair = pd.MultiIndex.from_arrays(label_arrays)
        codes, G = _group_codes(pair)
        counts["∩".join(dims)] = G
        pieces.append(("∩".join(dims), codes, G, -1.0))

    bread = fit.bread
    components = {}
    V = np.zeros((k_kept, k_kept))
    for name, codes, G, sign in pieces:
        c = (G / (G - 1.0)) * ((n - 1.0) / n_minus_k)
        piece = c * bread @ _meat(Xd, resid, codes, G) @ bread
        components[name] = piece
        V = V + sign * piece
    V = 0.5 * (V + V.T)

    flags: list[str] = []
    eigvals, eigvecs = np.linalg.eigh(V)
    floor_tol = -1e-12 * max(1.0, float(np.abs(eigvals).max()))
    if eigvals.min() < 0.0:
        if eigvals.min() < floor_tol:
            flags.append("vcov_floored")
        fixed = eigvecs @ np.diag(np.maximum(eigvals, 0.0)) @ eigvecs.T
    else:
        fixed = V
    return CgmResult(
        vcov=fixed,
        raw_vcov=V,
        components=components,
        cluster_counts=counts,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Logit
# ---------------------------------------------------------------------------


@dataclass
class LogitResult:
    params: np.ndarray
    vcov: np.ndarray
    fitted: np.ndarray
    loglik: float
    converged: bool
    n_iter: int


def logit_fit(
    y: np.ndarray,
    X: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LogitResult:
    """Newton-Raphson logit with step halving.

    Convergence requires the max-norm of the score to fall below ``tol``.
    Perfectly separated data raise :class:`Separation`; exhausting
    ``max_iter`` raises :class:`NonConvergence`.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ConfigError("logit outcome must be 0/1")
    n, k = X.shape

    beta = np.zeros(k)
    eta = X @ beta
    loglik = -n * np.log(2.0)
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - p)
        if np.abs(grad).max() < tol:
            w = p * (1.0 - p)
            H = X.T @ (X * w[:, None])
            return LogitResult(beta, np.linalg.pinv(H), p, loglik, True, it - 1)
        _check_separation(y, eta)
        w = np.maximum(p * (1.0 - p), 1e-12)
        H = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            _check_separation(y, eta, force=True)
            raise
        # step-halving keeps the log-likelihood monotone
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            eta_c = X @ cand
            ll = float(y @ eta_c - np.logaddexp(0.0, eta_c).sum())
            if ll >= loglik - 1e-12:
                break
            scale /= 2.0
        beta, eta, loglik = cand, eta_c, ll
    raise NonConvergence(f"logit did not converge in {max_iter} iterations")


def _check_separation(y, eta, force=False):
    big = np.abs(eta).max() > 30.0
    if big or force:
        pos, neg = eta > 0, eta < 0
        if (y[pos] == 1.0).all() and (y[neg] == 0.0).all() and (pos.any() or neg.any()):
            raise Separation("outcome perfectly separated by the design")


# ---------------------------------------------------------------------------
# Wald tests
# ---------------------------------------------------------------------------


@dataclass
class WaldResult:
    statistic: float
    df: int
    pvalue: float


def wald_test(
    params, vcov, R: np.ndarray, r: np.ndarray | float = 0.0
) -> WaldResult:
    """Chi-square test of ``R params = r``.

    ``params`` may be a Series or array; ``vcov`` the matching matrix.
    Raises :class:`SingularRVR` when the restriction covariance cannot be
    inverted.
    """
    beta = np.asarray(params, dtype=float).ravel()
    V = np.asarray(vcov, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    q = R.shape[0]
    rvec = np.broadcast_to(np.asarray(r, dtype=float).ravel(), (q,))
    diff = R @ beta - rvec
    rvr = R @ V @ R.T
    cond = np.linalg.cond(rvr)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularRVR(f"R V R' condition number {cond:.3e}")
    stat = float(diff @ np.linalg.solve(rvr, diff))
    return WaldResult(stat, q, float(stats.chi2.sf(stat, q)))


def wald_zero(fit: FitResult, names: Sequence[str],
              vcov: str = "fitted") -> WaldResult:
    """Joint test that the named coefficients are all zero.

    ``vcov="fitted"`` uses the variance the fit was built with (clustered
    when clustering was requested); ``vcov="classical"`` substitutes the
    homoskedastic variance from :meth:`FitResult.classical_vcov`.
    """
    idx = [list(fit.params.index).index(n) for n in names]
    R = np.zeros((len(idx), len(fit.params)))
    for row, col in enumerate(idx):
        R[row, col] = 1.0
    if vcov == "classical":
        V = fit.classical_vcov().to_numpy()
    elif vcov == "fitted":
        V = fit.vcov.to_numpy()
    else:
        raise ConfigError(f"vcov must be 'fitted' or 'classical', got {vcov!r}")
    return wald_test(fit.params, V, R)
