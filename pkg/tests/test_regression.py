import numpy as np
import pandas as pd
import pytest

from citypanel.errors import (
    ConfigError,
    NoVariation,
    RankDeficient,
    Separation,
    SingleCluster,
    SingularRVR,
)
from citypanel.regression import (
    DesignSpec,
    cgm_vcov,
    logit_fit,
    ols_fit,
    wald_test,
    wald_zero,
    within_transform,
)


def _grid_frame(n, t, rng=None, extra=None):
    """Long frame over an n x t grid with unit/time fixed effects."""
    rng = rng or np.random.default_rng(0)
    alpha = rng.normal(size=n)
    gamma = rng.normal(size=t)
    rows = []
    for i in range(n):
        for s in range(t):
            rows.append({"unit": f"u{i:03d}", "time": s,
                         "fe": alpha[i] + gamma[s]})
    frame = pd.DataFrame(rows)
    if extra:
        for name, fn in extra.items():
            frame[name] = fn(frame, rng)
    return frame


class TestWithinTransform:
    def test_two_by_two_identity(self):
        # balanced two-way demeaning = value - row mean - col mean + grand
        data = pd.DataFrame({
            "unit": ["a", "a", "b", "b"],
            "time": [0, 1, 0, 1],
            "y": [1.0, 2.0, 3.0, 7.0],
        })
        out = within_transform(data, ("unit", "time"), ["y"])
        y = np.array([1.0, 2.0, 3.0, 7.0]).reshape(2, 2)
        expect = y - y.mean(1, keepdims=True) - y.mean(0, keepdims=True) + y.mean()
        np.testing.assert_allclose(out["y"].to_numpy(), expect.ravel(), atol=1e-12)

    def test_one_dimension_single_pass(self):
        rng = np.random.default_rng(1)
        data = pd.DataFrame({"g": np.repeat(list("abc"), 5),
                             "y": rng.normal(size=15)})
        out, sweeps = within_transform(data, ("g",), ["y"], return_sweeps=True)
        for g in "abc":
            assert abs(out.loc[data["g"] == g, "y"].mean()) < 1e-12
        assert sweeps <= 2  # one subtracting sweep plus the convergence check

    def test_balanced_two_way_group_means_vanish(self):
        frame = _grid_frame(6, 4)
        out = within_transform(frame, ("unit", "time"), ["fe"])
        merged = frame[["unit", "time"]].assign(v=out["fe"].to_numpy())
        assert merged.groupby("unit")["v"].mean().abs().max() < 1e-10
        assert merged.groupby("time")["v"].mean().abs().max() < 1e-10
        # additive structure is annihilated entirely
        assert out["fe"].abs().max() < 1e-9

    def test_weighted_means_vanish(self):
        rng = np.random.default_rng(4)
        data = pd.DataFrame({"g": np.repeat(list("ab"), 4),
                             "y": rng.normal(size=8)})
        w = rng.uniform(0.5, 2.0, size=8)
        out = within_transform(data, ("g",), ["y"], weights=w)
        for g in "ab":
            m = data["g"] == g
            assert abs(np.average(out.loc[m, "y"], weights=w[m])) < 1e-12


class TestOlsFit:
    def test_simple_slope(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=200)
        data = pd.DataFrame({"x": x, "const": 1.0, "y": 2.0 * x + 1.0})
        fit = ols_fit(DesignSpec("y", ["const", "x"]), data)
        assert fit.params["x"] == pytest.approx(2.0, abs=1e-10)
        assert fit.params["const"] == pytest.approx(1.0, abs=1e-10)

    def test_additive_grid_recovers_effect(self):
        rng = np.random.default_rng(3)
        frame = _grid_frame(10, 6, rng, extra={
            "d": lambda f, r: (r.random(len(f)) < 0.4).astype(float)})
        frame["y"] = frame["fe"] + 0.5 * frame["d"]
        fit = ols_fit(DesignSpec("y", ["d"], absorb=("unit", "time")), frame)
        assert fit.params["d"] == pytest.approx(0.5, abs=1e-10)

    def test_frisch_waugh_matches_dummies(self):
        rng = np.random.default_rng(6)
        frame = _grid_frame(8, 5, rng, extra={
            "x": lambda f, r: r.normal(size=len(f))})
        frame["y"] = frame["fe"] + 0.7 * frame["x"] + rng.normal(0, 0.1, len(frame))
        fit = ols_fit(DesignSpec("y", ["x"], absorb=("unit", "time")), frame)
        dummies = pd.get_dummies(frame[["unit"]], drop_first=False, dtype=float)
        dummies = pd.concat(
            [dummies,
             pd.get_dummies(frame["time"], prefix="t", drop_first=True, dtype=float)],
            axis=1)
        X = np.column_stack([frame["x"].to_numpy(), dummies.to_numpy()])
        beta, *_ = np.linalg.lstsq(X, frame["y"].to_numpy(), rcond=None)
        assert fit.params["x"] == pytest.approx(beta[0], abs=1e-8)

    def test_residuals_orthogonal_to_design(self):
        rng = np.random.default_rng(7)
        frame = _grid_frame(8, 5, rng, extra={
            "x": lambda f, r: r.normal(size=len(f))})
        frame["y"] = frame["fe"] + frame["x"] + rng.normal(size=len(frame))
        fit = ols_fit(DesignSpec("y", ["x"], absorb=("unit", "time")), frame)
        assert abs(fit.design_matrix.T @ fit.residuals).max() < 1e-8

    def test_dof_accounting(self):
        frame = _grid_frame(5, 4)
        frame["x"] = np.random.default_rng(8).normal(size=len(frame))
        frame["y"] = frame["fe"] + frame["x"]
        fit = ols_fit(DesignSpec("y", ["x"], absorb=("unit", "time")), frame)
        # n - k - (n_units + n_times - 1)
        assert fit.dof == 20 - 1 - (5 + 4 - 1)

    def test_no_variation(self):
        frame = _grid_frame(4, 3)
        frame["c"] = frame["unit"].map(lambda u: float(u == "u001"))
        frame["y"] = frame["fe"]
        with pytest.raises(NoVariation):
            ols_fit(DesignSpec("y", ["c"], absorb=("unit",)), frame)

    def test_rank_deficient_and_dropping(self):
        rng = np.random.default_rng(9)
        frame = _grid_frame(6, 4, rng, extra={
            "x": lambda f, r: r.normal(size=len(f))})
        frame["x2"] = 2.0 * frame["x"]
        frame["y"] = frame["fe"] + frame["x"]
        spec = DesignSpec("y", ["x", "x2"], absorb=("unit", "time"))
        with pytest.raises(RankDeficient):
            ols_fit(spec, frame)
        fit = ols_fit(spec, frame, drop_collinear=True)
        assert fit.dropped == ["x2"]
        assert fit.params["x"] == pytest.approx(1.0, abs=1e-8)

    def test_weights_match_row_duplication(self):
        rng = np.random.default_rng(10)
        data = pd.DataFrame({"x": rng.normal(size=30), "const": 1.0})
        data["y"] = 1.5 * data["x"] + rng.normal(size=30)
        data["w"] = np.where(np.arange(30) < 10, 2.0, 1.0)
        wfit = ols_fit(DesignSpec("y", ["const", "x"], weights="w"), data)
        doubled = pd.concat([data, data.iloc[:10]], ignore_index=True)
        dfit = ols_fit(DesignSpec("y", ["const", "x"]), doubled)
        assert wfit.params["x"] == pytest.approx(dfit.params["x"], abs=1e-12)

    def test_missing_column_is_config_error(self):
        frame = _grid_frame(3, 3)
        frame["y"] = 0.0
        with pytest.raises(ConfigError):
            ols_fit(DesignSpec("y", ["nope"]), frame)


def _brute_cgm_raw(fit, dims):
    """Textbook triple-sum clustered variance, pure Python accumulation."""
    Xd, resid = fit.design_matrix, fit.residuals
    n, k = Xd.shape
    bread = fit.bread

    def one_way(labels):
        groups = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
        G = len(groups)
        meat = np.zeros((k, k))
        for idxs in groups.values():
            for i in idxs:
                for j in idxs:
                    meat += np.outer(Xd[i], Xd[j]) * (resid[i] * resid[j])
        c = (G / (G - 1.0)) * ((n - 1.0) / fit.dof)
        return c * bread @ meat @ bread

    a = list(fit.cluster_labels[dims[0]])
    V = one_way(a)
    if len(dims) == 2:
        b = list(fit.cluster_labels[dims[1]])
        V = V + one_way(b) - one_way(list(zip(a, b)))
    return V


class TestClusteredVcov:
    def _fit(self, n=8, t=6, seed=0, cluster=("unit", "time")):
        rng = np.random.default_rng(seed)
        frame = _grid_frame(n, t, rng, extra={
            "x": lambda f, r: r.normal(size=len(f)),
            "z": lambda f, r: r.normal(size=len(f))})
        frame["y"] = frame["fe"] + 0.3 * frame["x"] - 0.2 * frame["z"] + \
            rng.normal(size=len(frame))
        return ols_fit(
            DesignSpec("y", ["x", "z"], absorb=("unit", "time"), cluster=cluster),
            frame)

    def test_singleton_clusters_reduce_to_hc1(self):
        rng = np.random.default_rng(12)
        data = pd.DataFrame({"x": rng.normal(size=40), "const": 1.0})
        data["y"] = data["x"] + rng.normal(size=40)
        data["row"] = np.arange(40)
        fit = ols_fit(DesignSpec("y", ["const", "x"], cluster=("row",)), data)
        X = data[["const", "x"]].to_numpy()
        e = fit.residuals
        bread = np.linalg.inv(X.T @ X)
        hc1 = (40 / (40 - 2)) * bread @ (X * e[:, None] ** 2).T @ X @ bread
        np.testing.assert_allclose(fit.vcov.to_numpy(), hc1, rtol=1e-10)

    def test_matches_brute_force(self):
        for seed in range(5):
            fit = self._fit(seed=seed)
            got = cgm_vcov(fit, ("unit", "time"))
            want = _brute_cgm_raw(fit, ("unit", "time"))
            np.testing.assert_allclose(got.raw_vcov, want, rtol=1e-10)

    def test_one_way_matches_brute_force(self):
        fit = self._fit(cluster=("unit",))
        got = cgm_vcov(fit, ("unit",))
        want = _brute_cgm_raw(fit, ("unit",))
        np.testing.assert_allclose(got.raw_vcov, want, rtol=1e-10)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(13)
        frame = _grid_frame(6, 5, rng, extra={
            "x": lambda f, r: r.normal(size=len(f))})
        frame["y"] = frame["fe"] + frame["x"] + rng.normal(size=len(frame))
        spec = DesignSpec("y", ["x"], absorb=("unit", "time"),
                          cluster=("unit", "time"))
        fit = ols_fit(spec, frame)
        shuffled = frame.sample(frac=1.0, random_state=5).reset_index(drop=True)
        fit2 = ols_fit(spec, shuffled)
        assert fit.params["x"] == pytest.approx(fit2.params["x"], abs=1e-12)
        assert fit.se["x"] == pytest.approx(fit2.se["x"], abs=1e-12)

    def test_intersection_subtracted(self):
        fit = self._fit()
        got = cgm_vcov(fit, ("unit", "time"))
        comp = got.components
        np.testing.assert_allclose(
            got.raw_vcov,
            comp["unit"] + comp["time"] - comp["unit∩time"],
            rtol=1e-12)

    def test_single_cluster_raises(self):
        rng = np.random.default_rng(14)
        data = pd.DataFrame({"x": rng.normal(size=10), "const": 1.0,
                             "g": ["only"] * 10})
        data["y"] = data["x"]
        with pytest.raises(SingleCluster):
            ols_fit(DesignSpec("y", ["const", "x"], cluster=("g",)), data)

    def test_floored_vcov_is_psd_and_flagged_consistently(self):
        for seed in range(10):
            fit = self._fit(n=4, t=4, seed=seed)
            eig = np.linalg.eigvalsh(fit.vcov.to_numpy())
            assert eig.min() >= -1e-12
            raw = cgm_vcov(fit, ("unit", "time"))
            if np.linalg.eigvalsh(raw.raw_vcov).min() < -1e-10:
                assert "vcov_floored" in fit.flags


class TestLogit:
    def test_recovers_coefficients(self):
        rng = np.random.default_rng(15)
        n = 100_000
        x = rng.normal(size=n)
        eta = 1.0 + 2.0 * x
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        res = logit_fit(y, np.column_stack([np.ones(n), x]))
        assert res.converged
        assert res.params[0] == pytest.approx(1.0, abs=0.05)
        assert res.params[1] == pytest.approx(2.0, abs=0.05)

    def test_balanced_intercept_only(self):
        y = np.array([0.0, 1.0] * 8)
        res = logit_fit(y, np.ones((16, 1)))
        assert res.params[0] == pytest.approx(0.0, abs=1e-8)

    def test_separation(self):
        x = np.concatenate([-np.arange(1, 9), np.arange(1, 9)]).astype(float)
        y = (x > 0).astype(float)
        with pytest.raises(Separation):
            logit_fit(y, np.column_stack([np.ones(16), x]))

    def test_rejects_non_binary(self):
        with pytest.raises(ConfigError):
            logit_fit(np.array([0.0, 2.0]), np.ones((2, 1)))


class TestWald:
    def test_true_restriction_gives_zero(self):
        beta = np.array([1.0, -2.0])
        V = np.eye(2)
        R = np.array([[1.0, 0.0]])
        res = wald_test(beta, V, R, r=1.0)
        assert res.statistic == pytest.approx(0.0, abs=1e-15)
        assert res.pvalue == pytest.approx(1.0)
        assert res.df == 1

    def test_known_chi_square(self):
        # scalar case: W = (b - r)^2 / v
        res = wald_test(np.array([2.0]), np.array([[4.0]]), np.array([[1.0]]))
        assert res.statistic == pytest.approx(1.0, abs=1e-12)

    def test_singular_restriction_covariance(self):
        beta = np.array([1.0, 1.0])
        V = np.eye(2)
        R = np.array([[1.0, 0.0], [1.0, 0.0]])  # duplicate restriction
        with pytest.raises(SingularRVR):
            wald_test(beta, V, R)

    def test_wald_zero_classical(self):
        rng = np.random.default_rng(16)
        data = pd.DataFrame({"x": rng.normal(size=60), "const": 1.0})
        data["y"] = 0.0 * data["x"] + rng.normal(size=60)
        fit = ols_fit(DesignSpec("y", ["const", "x"]), data)
        res = wald_zero(fit, ["x"], vcov="classical")
        # matches the square of the classical t statistic
        t2 = (fit.params["x"] ** 2) / fit.classical_vcov().loc["x", "x"]
        assert res.statistic == pytest.approx(t2, rel=1e-12)
        with pytest.raises(ConfigError):
            wald_zero(fit, ["x"], vcov="bogus")
