"""Command-line entry point.

One subcommand per analysis stage: ``ingest``, ``describe``,
``break-test``, ``ddd``, ``event-study``, ``att-gt``, ``synth``,
``gsynth``, ``pvar``, ``simulate``.  Every run writes a versioned JSON
summary (also echoed to stdout) plus stage-specific CSV artifacts into
``--out``.  Reruns with the same inputs, seed and thread count are
byte-identical; the thread flag only bounds BLAS parallelism and never
changes results.

Exit codes: 0 success, 1 estimator failure, 2 data problem, 3 bad
configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .breaks import aggregate_series, zivot_andrews
from .did import (
    cs_att,
    ddd_dynamic,
    ddd_static,
    dr_did,
    imputation_att,
    ipw_did,
    switcher_did,
)
from .errors import ConfigError, DataError, EstimatorError
from .geo import RadiusIndexConfig
from .gsynth import gsynth_att
from .panel import (
    COVARIATE_FIELDS,
    INSTITUTION_COLUMNS,
    BalancedPanel,
    ExposureVariant,
    Region,
    TreatmentRule,
    TreatmentSchedule,
    build_treatment,
    load_institutions,
    load_panel_csv,
    log_outcome,
    write_panel_csvs,
)
from .pvar import granger_wald, pvar1_fit
from .simulate import SimulationConfig, simulate_panel
from .synth import build_scm_problem, fit_scm, placebo_inference

SCHEMA_PREFIX = "citypanel"
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Argument errors are configuration errors (exit 3), not exit 2."""

    def error(self, message):  # noqa: D401 - argparse hook
        raise ConfigError(message)


def _fmt(x) -> str:
    """Round-trip text for one CSV cell."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _jsonable(obj):
    """Recursively convert to plain JSON types; NaN becomes null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, pd.Series):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    return obj


def _write_json(path: Path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), sort_keys=True, indent=2)
    path.write_text(text + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _summary(command: str, body: dict) -> dict:
    return {
        "schema": f"{SCHEMA_PREFIX}.{command}/{SCHEMA_VERSION}",
        "version": __version__,
        "command": command,
        **body,
    }


def _stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


def _need(args, *names):
    for name in names:
        if getattr(args, name.replace("-", "_"), None) is None:
            raise ConfigError(f"--{name} is required for this subcommand")


def _load_panel(args) -> BalancedPanel:
    _need(args, "cities", "panel")
    return load_panel_csv(args.cities, args.panel, args.covariates)


_SCHEDULE_HEADER = ("city_id", "cohort", "t0", "rule")


def _write_schedule_csv(schedule: TreatmentSchedule, path: Path) -> None:
    rows = []
    for i, cid in enumerate(schedule.city_ids):
        g = schedule.cohort[i]
        rows.append(
            (cid, "" if not math.isfinite(g) else int(g), schedule.t0,
             schedule.rule)
        )
    _write_csv(path, _SCHEDULE_HEADER, rows)


def _load_schedule_csv(path, panel: BalancedPanel) -> TreatmentSchedule:
    cohort = np.full(panel.n_cities, math.inf)
    t0 = None
    rule = ""
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = panel.city_index(row["city_id"])
            if row["cohort"]:
                cohort[i] = float(row["cohort"])
            t0 = int(row["t0"])
            rule = row.get("rule", "")
    if t0 is None:
        raise DataError(f"{path}: empty schedule file")
    years = np.asarray(panel.year_grid, dtype=float)
    intensity = (years[None, :] >= cohort[:, None]).astype(float)
    return TreatmentSchedule(
        city_ids=panel.city_ids,
        years=panel.year_grid,
        cohort=cohort,
        intensity=intensity,
        t0=t0,
        rule=rule,
    )


def _get_schedule(args, panel: BalancedPanel) -> TreatmentSchedule:
    if getattr(args, "schedule", None):
        return _load_schedule_csv(args.schedule, panel)
    if getattr(args, "rule", None):
        _need(args, "institutions")
        inst = load_institutions(args.institutions)
        variant = ExposureVariant(args.variant)
        radius = None
        if variant is ExposureVariant.RADIUS_NETWORK:
            radius = RadiusIndexConfig()
        return build_treatment(
            panel, TreatmentRule(args.rule), variant,
            institutions=inst, radius_config=radius,
        )
    raise ConfigError("supply either --schedule or --rule with --institutions")


def _covariate_list(args) -> list[str] | None:
    spec = getattr(args, "controls", None)
    if spec in (None, "", "none"):
        return None
    if spec == "structural":
        return list(COVARIATE_FIELDS)
    return [s.strip() for s in spec.split(",") if s.strip()]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args, out: Path) -> dict:
    panel = _load_panel(args)
    written = write_panel_csvs(panel, out)
    body = {
        "n_cities": panel.n_cities,
        "n_years": panel.n_years,
        "n_cells": panel.n_cities * panel.n_years,
        "year_min": panel.year_grid[0],
        "year_max": panel.year_grid[-1],
        "files": {k: str(v) for k, v in written.items()},
    }
    if args.institutions:
        inst = load_institutions(args.institutions)
        body["institution_rows"] = int(len(inst))
    return _summary("ingest", body)


def cmd_describe(args, out: Path) -> dict:
    panel = _load_panel(args)

    def stat_row(section, name, values, labels=None):
        values = np.asarray(values, dtype=float)
        i_min = int(np.argmin(values))
        i_max = int(np.argmax(values))
        return (
            section, name, values.size,
            float(values.mean()), float(values.std(ddof=1)),
            float(values[i_min]), labels[i_min] if labels else "",
            float(values[i_max]), labels[i_max] if labels else "",
        )

    cell_labels = [
        f"{cid}@{y}" for cid in panel.city_ids for y in panel.year_grid
    ]
    rows = [
        stat_row("outcomes", "population", panel.population.ravel(), cell_labels),
        stat_row("outcomes", "log_population", log_outcome(panel).ravel(), cell_labels),
    ]
    for name in COVARIATE_FIELDS:
        rows.append(stat_row("covariates", name, panel.covariates[name].ravel(),
                             cell_labels))
    if args.institutions:
        inst = load_institutions(args.institutions)
        for col in INSTITUTION_COLUMNS:
            labels = [
                f"{c}@{y}" for c, y in zip(inst["city_id"], inst["year"])
            ]
            rows.append(stat_row("institutions", col, inst[col].to_numpy(float),
                                 labels))
    header = ("section", "variable", "n", "mean", "sd",
              "min", "min_cell", "max", "max_cell")
    _write_csv(out / "describe.csv", header, rows)
    body = {
        "n_cities": panel.n_cities,
        "n_years": panel.n_years,
        "n_cells": panel.n_cities * panel.n_years,
        "variables": {
            r[1]: {"n": r[2], "mean": r[3], "sd": r[4], "min": r[5], "max": r[7]}
            for r in rows
        },
    }
    return _summary("describe", body)


def _series_from_args(args, panel_ok=True):
    if args.input:
        df = pd.read_csv(args.input)
        if "value" in df.columns:
            values = df["value"].to_numpy(float)
            index = df["year"].tolist() if "year" in df.columns else None
        elif df.shape[1] == 1:
            values = df.iloc[:, 0].to_numpy(float)
            index = None
        else:
            raise DataError(
                f"{args.input}: expected a 'value' column or a single column"
            )
        if index is not None:
            return pd.Series(values, index=index)
        return pd.Series(values)
    if panel_ok and args.cities and args.panel:
        panel = _load_panel(args)
        regions = None
        if args.region:
            regions = [Region(r.strip()) for r in args.region.split(",")]
        return aggregate_series(panel, regions, statistic=args.statistic)
    raise ConfigError("supply --input series.csv or --cities/--panel")


def cmd_break_test(args, out: Path) -> dict:
    series = _series_from_args(args)
    result = zivot_andrews(
        series, trim=args.trim, max_lag=args.max_lag, model=args.model
    )
    _write_csv(
        out / "break_candidates.csv",
        ("break_label", "t_statistic"),
        [(k, float(v)) for k, v in result.candidate_stats.items()],
    )
    body = {
        "statistic": result.statistic,
        "break_index": result.break_index,
        "break_label": _jsonable(result.break_label),
        "model": result.model,
        "lags": result.lags,
        "trim": result.trim,
        "n_obs": result.n_obs,
        "pvalue": result.pvalue,
        "pvalue_approximate": result.pvalue_approximate,
        "critical_values": result.critical_values,
        "rejects_5pct": bool(result.rejects("5%")),
        "short_series": result.short_series,
    }
    return _summary("break_test", body)


def _fe_joint_pvalues(panel, schedule, covariates, outcome):
    """Classical F tests that each absorbed fixed-effect block matters."""
    from scipy import stats

    from .did import _ddd_frame
    from .regression import DesignSpec, ols_fit

    frame = _ddd_frame(panel, schedule, covariates, outcome)
    regressors = [
        "exposure", "group_x_post", "exposure_x_post", "exposure_x_group",
        "triple", *(covariates or ()),
    ]
    out = {}
    full = ols_fit(
        DesignSpec(outcome="y", regressors=regressors,
                   absorb=("city_id", "year")),
        frame, drop_collinear=True,
    )
    rss_full = float(full.residuals @ full.residuals)
    for label, keep in (("city_fe", "year"), ("year_fe", "city_id")):
        restricted = ols_fit(
            DesignSpec(outcome="y", regressors=regressors, absorb=(keep,)),
            frame, drop_collinear=True,
        )
        rss_r = float(restricted.residuals @ restricted.residuals)
        dropped_col = "city_id" if keep == "year" else "year"
        q = frame[dropped_col].nunique() - 1
        f_stat = max(rss_r - rss_full, 0.0) / q / (rss_full / full.dof)
        out[label] = float(stats.f.sf(f_stat, q, full.dof))
    return out


_RULE_COEF_LABEL = {
    ("europe_post1100_law_school", "isolated"): "Post-1100 x Law School",
    ("europe_post1100_law_school", "radius_network"):
        "Post-1100 x # law schools in 300km radius",
    ("islam_post1200_madrasa", "isolated"): "Post-1200 Shariatic turn x Madrasa",
    ("islam_post1200_madrasa", "radius_network"):
        "Post-1200 Shariatic turn x # madrasas in 300km radius",
}


def cmd_ddd(args, out: Path) -> dict:
    panel = _load_panel(args)
    schedule = _get_schedule(args, panel)
    covariates = _covariate_list(args)
    result = ddd_static(panel, schedule, covariates=covariates,
                        outcome=args.outcome)

    label = _RULE_COEF_LABEL.get(
        (schedule.rule, schedule.variant),
        f"Post-{schedule.t0} x exposure",
    )
    controls_p = None
    if covariates:
        from .regression import wald_zero

        present = [c for c in covariates if c in result.fit.params.index]
        if present:
            controls_p = wald_zero(result.fit, present).pvalue
    fe_p = _fe_joint_pvalues(panel, schedule, covariates, args.outcome)

    exposure_kind = (
        "Binary" if set(np.unique(schedule.intensity)) <= {0.0, 1.0}
        else "Continuous"
    )
    rows = [
        ("", "(1)"),
        ("Exposure", exposure_kind),
        ("Panel A: Dependent variable: city population (log)", ""),
        (label, f"{result.estimate:.3f}{_stars(result.pvalue)}"),
        ("", f"({result.se:.3f})"),
        ("# treatment-control paired observations", result.n_obs),
        ("Structural controls", "YES" if covariates else "NO"),
        ("(p-values)",
         f"({controls_p:.3f})" if controls_p is not None else ""),
        ("City-fixed effects", "YES"),
        ("(p-value)", f"({fe_p['city_fe']:.3f})"),
        ("Time-fixed effects (p-value)", "YES"),
        ("", f"({fe_p['year_fe']:.3f})"),
    ]
    _write_csv(out / "ddd_table.csv", ("label", "value"), rows)

    body = {
        "estimate": result.estimate,
        "se": result.se,
        "pvalue": result.pvalue,
        "percent_effect": result.percent_effect,
        "n_obs": result.n_obs,
        "rule": schedule.rule,
        "variant": schedule.variant,
        "t0": schedule.t0,
        "controls": covariates or [],
        "controls_pvalue": controls_p,
        "fixed_effect_pvalues": fe_p,
        "flags": sorted(result.fit.flags),
    }
    return _summary("ddd", body)


def cmd_event_study(args, out: Path) -> dict:
    panel = _load_panel(args)
    schedule = _get_schedule(args, panel)
    covariates = _covariate_list(args)
    study = ddd_dynamic(panel, schedule, covariates=covariates,
                        outcome=args.outcome)
    rows = [
        (int(r), float(study.coefficients[r]), float(study.se[r]))
        for r in study.coefficients.index
    ]
    _write_csv(out / "event_study.csv", ("event_time", "estimate", "se"), rows)
    body = {
        "reference": study.reference,
        "pretrend_pvalue": study.pretrend_pvalue,
        "coefficients": {str(int(k)): float(v)
                         for k, v in study.coefficients.items()},
        "se": {str(int(k)): float(v) for k, v in study.se.items()},
    }
    return _summary("event_study", body)


_ATT_ESTIMATORS = {
    "cs": cs_att,
    "ipw": ipw_did,
    "dr": dr_did,
    "imputation": imputation_att,
    "switcher": switcher_did,
}


def cmd_att_gt(args, out: Path) -> dict:
    panel = _load_panel(args)
    schedule = _get_schedule(args, panel)
    covariates = _covariate_list(args)
    kwargs = dict(outcome=args.outcome, n_boot=args.boot, seed=args.seed)
    est = args.estimator
    if est in ("cs",):
        result = cs_att(panel, schedule, control=args.control, **kwargs)
    elif est in ("ipw", "dr"):
        fn = _ATT_ESTIMATORS[est]
        result = fn(panel, schedule, covariates=covariates,
                    control=args.control, **kwargs)
    elif est == "imputation":
        result = imputation_att(panel, schedule, covariates=covariates, **kwargs)
    elif est == "switcher":
        result = switcher_did(panel, schedule, max_horizon=args.max_horizon,
                              outcome=args.outcome, n_boot=args.boot,
                              seed=args.seed)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown estimator {est!r}")

    if est == "imputation":
        rows = [
            (int(g), int(t), float(e), math.nan)
            for (g, t), e in result.by_group_time.items()
        ]
        body = {
            "estimator": est,
            "overall": result.overall,
            "overall_se": result.overall_se,
            "percent_effect": result.percent_effect,
            "dropped_cities": result.dropped_cities,
            "dropped_years": result.dropped_years,
            "n_boot": result.n_boot,
            "seed": result.seed,
        }
    elif est == "switcher":
        rows = [
            (0, int(h), float(result.dynamic[h]), float(result.dynamic_se[h]))
            for h in result.dynamic.index
        ]
        body = {
            "estimator": est,
            "estimate": result.estimate,
            "se": result.se,
            "placebo": result.placebo,
            "placebo_se": result.placebo_se,
            "dynamic": {str(int(k)): float(v) for k, v in result.dynamic.items()},
            "placebos": {str(int(k)): float(v)
                         for k, v in result.placebos.items()},
            "n_boot": result.n_boot,
            "seed": result.seed,
        }
    else:
        rows = [
            (int(r.cohort), int(r.year), float(r.estimate), float(r.se))
            for r in result.cells.itertuples()
        ]
        body = {
            "estimator": est,
            "control": result.control,
            "overall": result.overall,
            "overall_se": result.overall_se,
            "percent_effect": result.percent_effect,
            "by_cohort": {str(int(k)): float(v)
                          for k, v in result.by_cohort.items()},
            "by_event": {str(int(k)): float(v)
                         for k, v in result.by_event.items()},
            "n_boot": result.n_boot,
            "seed": result.seed,
            "flags": sorted(result.flags),
        }
    _write_csv(out / "attgt.csv", ("cohort", "time", "estimate", "se"), rows)
    return _summary("att_gt", body)


def cmd_synth(args, out: Path) -> dict:
    panel = _load_panel(args)
    _need(args, "treated", "t0")
    treated = [s.strip() for s in args.treated.split(",")]
    if len(treated) == 1:
        treated = treated[0]
    donors = None
    if args.donors and args.donors != "all":
        region_names = {r.value for r in Region}
        if args.donors in region_names:
            donors = [
                c.city_id for c in panel.cities
                if c.region is Region(args.donors)
            ]
        else:
            donors = [s.strip() for s in args.donors.split(",")]
    predictors = (
        "outcome_path" if args.predictors == "outcome_path"
        else [s.strip() for s in args.predictors.split(",")]
    )
    problem = build_scm_problem(
        panel, treated, args.t0, donors=donors,
        predictors=predictors, outcome=args.outcome,
    )
    fit = fit_scm(problem, seed=args.seed)
    _write_csv(
        out / "weights.csv", ("donor", "weight"),
        [(cid, float(w)) for cid, w in fit.weights.items()],
    )
    years = list(problem.years)
    synthetic = fit.weights.to_numpy() @ problem.y_donors
    _write_csv(
        out / "gaps.csv", ("year", "observed", "synthetic", "gap"),
        [
            (int(y), float(problem.y_treated[j]), float(synthetic[j]),
             float(fit.gaps.iloc[j]))
            for j, y in enumerate(years)
        ],
    )
    body = {
        "treated": fit.treated_id,
        "t0": args.t0,
        "att": fit.att,
        "pre_rmspe": fit.pre_rmspe,
        "post_rmspe": fit.post_rmspe,
        "rmspe_ratio": fit.ratio,
        "n_donors": len(problem.donor_ids),
        "v": {k: float(v) for k, v in fit.v.items()},
    }
    if args.placebo:
        mode = "in_space_full" if args.placebo == "in-space" else "random_sample"
        n_samples = args.placebo_samples
        placebo = placebo_inference(problem, fit, mode=mode,
                                    n_samples=n_samples, seed=args.seed)
        pvals = {
            "p_overall": placebo.p_overall,
            "p_by_year": {str(int(k)): float(v)
                          for k, v in placebo.p_by_year.items()},
            "treated_ratio": placebo.treated_ratio,
            "n_placebos": placebo.n_placebos,
            "mode": placebo.mode,
        }
        _write_json(out / "pvalues.json", pvals)
        body["placebo"] = pvals
    return _summary("synth", body)


def cmd_gsynth(args, out: Path) -> dict:
    panel = _load_panel(args)
    if args.treated and not (args.schedule or args.rule):
        cohort = np.full(panel.n_cities, math.inf)
        for cid in args.treated.split(","):
            cohort[panel.city_index(cid.strip())] = float(args.onset)
        years = np.asarray(panel.year_grid, dtype=float)
        schedule = TreatmentSchedule(
            city_ids=panel.city_ids,
            years=panel.year_grid,
            cohort=cohort,
            intensity=(years[None, :] >= cohort[:, None]).astype(float),
            t0=int(args.onset) - (panel.year_grid[1] - panel.year_grid[0]),
            rule="cli_treated_list",
        )
    else:
        schedule = _get_schedule(args, panel)
    covariates = _covariate_list(args)
    r: int | str = "auto" if args.r == "auto" else int(args.r)
    result = gsynth_att(
        panel, schedule, r=r, r_max=args.r_max, covariates=covariates,
        outcome=args.outcome, n_boot=args.boot, seed=args.seed,
    )

    p_overall = _normal_p(result.overall, result.overall_se)
    rows = [
        ("", "(1)"),
        ("", "Interactive fixed-effects algorithm"),
        ("Panel A: Overall ATT estimate", ""),
        ("lambda_1",
         f"{result.overall:.3f}{_stars(p_overall)} ({result.overall_se:.3f})"),
        ("Empirical 95% confidence intervals",
         f"({result.ci_lower:.3f}, {result.ci_upper:.3f})"),
        ("Panel B: Estimated ATT by year", ""),
    ]
    for year, est in result.att_by_year.items():
        se = float(result.att_by_year_se.get(year, math.nan))
        p = _normal_p(est, se)
        rows.append(
            (f"lambda_1,{int(year)}", f"{est:.3f}{_stars(p)} ({se:.3f})")
        )
    _write_csv(out / "att.csv", ("label", "value"), rows)

    body = {
        "overall": result.overall,
        "overall_se": result.overall_se,
        "ci_lower": result.ci_lower,
        "ci_upper": result.ci_upper,
        "percent_effect": result.percent_effect,
        "r": result.r,
        "cv_mspe": ({str(k): float(v) for k, v in result.cv_mspe.items()}
                    if result.cv_mspe is not None else None),
        "att_by_year": {str(int(k)): float(v)
                        for k, v in result.att_by_year.items()},
        "att_by_year_se": {str(int(k)): float(v)
                           for k, v in result.att_by_year_se.items()},
        "n_treated": result.n_treated,
        "n_controls": result.n_controls,
        "n_boot": result.n_boot,
        "seed": result.seed,
        "flags": sorted(result.flags),
    }
    return _summary("gsynth", body)


def _normal_p(est: float, se: float) -> float:
    from scipy import stats

    if not (math.isfinite(est) and math.isfinite(se)) or se <= 0:
        return math.nan
    return float(2.0 * stats.norm.sf(abs(est) / se))


def _pvar_frame(panel: BalancedPanel, variables, institutions) -> pd.DataFrame:
    logs = log_outcome(panel)
    inst_wide = {}
    if institutions is not None:
        for col in INSTITUTION_COLUMNS:
            piv = institutions.pivot_table(
                index="city_id", columns="year", values=col, sort=True
            )
            piv = piv.reindex(index=list(panel.city_ids),
                              columns=list(panel.year_grid))
            inst_wide[col] = piv.to_numpy(dtype=float)
    frames = {}
    for v in variables:
        if v == "log_pop":
            frames[v] = logs
        elif v == "population":
            frames[v] = panel.population.astype(float)
        elif v in inst_wide:
            frames[v] = inst_wide[v]
        elif v == "law_schools" and {"university", "law_faculty"} <= set(inst_wide):
            frames[v] = inst_wide["university"] * inst_wide["law_faculty"]
        elif v in panel.covariates:
            frames[v] = panel.covariates[v]
        else:
            raise ConfigError(f"unknown variable {v!r}")
        if not np.isfinite(frames[v]).all():
            raise DataError(f"variable {v!r} has missing cells")
    rows = []
    for i, cid in enumerate(panel.city_ids):
        for j, year in enumerate(panel.year_grid):
            rows.append(
                {"city_id": cid, "year": year,
                 **{v: float(frames[v][i, j]) for v in variables}}
            )
    return pd.DataFrame(rows)


def cmd_pvar(args, out: Path) -> dict:
    panel = _load_panel(args)
    _need(args, "vars")
    variables = [s.strip() for s in args.vars.split(",") if s.strip()]
    institutions = (
        load_institutions(args.institutions) if args.institutions else None
    )
    data = _pvar_frame(panel, variables, institutions)
    fit = pvar1_fit(data, variables)
    rows = []
    for eq in variables:
        for rhs in variables:
            rows.append(
                (eq, rhs, float(fit.A.loc[eq, rhs]), float(fit.se.loc[eq, rhs]))
            )
    _write_csv(out / "pvar.csv", ("equation", "lag_of", "estimate", "se"), rows)
    body = {
        "variables": variables,
        "A": {eq: {rhs: float(fit.A.loc[eq, rhs]) for rhs in variables}
              for eq in variables},
        "se": {eq: {rhs: float(fit.se.loc[eq, rhs]) for rhs in variables}
               for eq in variables},
        "n_units": fit.n_units,
        "n_obs": fit.n_obs,
        "stable": fit.stable(),
    }
    if args.granger:
        if len(variables) < 2:
            raise ConfigError("--granger needs at least two variables")
        tests = {}
        for cause in variables:
            for effect in variables:
                if cause == effect:
                    continue
                w = granger_wald(fit, cause, effect)
                tests[f"{cause}->{effect}"] = {
                    "statistic": w.statistic, "df": w.df, "pvalue": w.pvalue,
                }
        body["granger"] = tests
    return _summary("pvar", body)


def cmd_simulate(args, out: Path) -> dict:
    cfg = (SimulationConfig.from_json(args.config) if args.config
           else SimulationConfig())
    if args.seed is not None:
        cfg = SimulationConfig(**{**cfg.__dict__, "seed": args.seed})
    cfg.validate()
    panel, schedule, truth = simulate_panel(cfg)
    files = write_panel_csvs(panel, out)
    _write_schedule_csv(schedule, out / "schedule.csv")
    truth_payload = {
        "tau": truth.tau,
        "percent_effect": truth.percent_effect,
        "sigma": truth.sigma,
        "beta": truth.beta,
        "seed": truth.seed,
        "n_cities": cfg.n_cities,
        "n_treated": cfg.n_treated,
        "n_factors": cfg.n_factors,
        "cohort_years": list(cfg.cohort_years),
        "staggered": cfg.staggered,
        "cohort": {cid: (None if not math.isfinite(g) else int(g))
                   for cid, g in zip(panel.city_ids, truth.cohort)},
    }
    _write_json(out / "truth.json", truth_payload)
    body = {
        "config": _jsonable(cfg.__dict__),
        "files": {**{k: str(v) for k, v in files.items()},
                  "schedule": str(out / "schedule.csv"),
                  "truth": str(out / "truth.json")},
        "tau": truth.tau,
    }
    return _summary("simulate", body)


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def _add_input_args(p, institutions=True):
    p.add_argument("--cities", help="cities.csv path")
    p.add_argument("--panel", help="panel.csv path")
    p.add_argument("--covariates", help="covariates.csv path")
    if institutions:
        p.add_argument("--institutions", help="institutions.csv path")


def _add_treatment_args(p):
    p.add_argument("--rule", choices=[r.value for r in TreatmentRule])
    p.add_argument("--variant", choices=[v.value for v in ExposureVariant],
                   default=ExposureVariant.ISOLATED.value)
    p.add_argument("--schedule", help="schedule.csv from a previous run")
    p.add_argument("--controls", default="none",
                   help="'structural', 'none', or comma-separated covariates")
    p.add_argument("--outcome", choices=["log", "level"], default="log")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="citypanel", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    common = dict(seed=0, out=".", threads=None)

    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=common["seed"])
        p.add_argument("--out", default=common["out"])
        p.add_argument("--threads", type=int, default=common["threads"])
        return p

    p = add("ingest", cmd_ingest, help="validate inputs, write normalized CSVs")
    _add_input_args(p)

    p = add("describe", cmd_describe, help="descriptive statistics tables")
    _add_input_args(p)

    p = add("break-test", cmd_break_test,
            help="endogenous-break unit-root test")
    _add_input_args(p, institutions=False)
    p.add_argument("--input", help="series CSV with year,value columns")
    p.add_argument("--region", help="comma-separated region filter")
    p.add_argument("--statistic", choices=["mean", "median", "sum"],
                   default="mean")
    p.add_argument("--trim", type=float, default=0.15)
    p.add_argument("--max-lag", type=int, default=None)
    p.add_argument("--model", choices=["intercept", "trend", "both"],
                   default="both")

    p = add("ddd", cmd_ddd, help="static triple-difference regression")
    _add_input_args(p)
    _add_treatment_args(p)

    p = add("event-study", cmd_event_study,
            help="dynamic (event-time) triple-difference")
    _add_input_args(p)
    _add_treatment_args(p)

    p = add("att-gt", cmd_att_gt, help="cohort-time ATT estimators")
    _add_input_args(p)
    _add_treatment_args(p)
    p.add_argument("--estimator", choices=sorted(_ATT_ESTIMATORS),
                   default="cs")
    p.add_argument("--control",
                   choices=["never_treated", "not_yet_treated"],
                   default="never_treated")
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--max-horizon", type=int, default=5)

    p = add("synth", cmd_synth, help="classical synthetic control")
    _add_input_args(p, institutions=False)
    p.add_argument("--treated", help="treated city id (or comma list)")
    p.add_argument("--donors", default="all",
                   help="'all', a region name, or comma-separated city ids")
    p.add_argument("--t0", type=int, help="first treated year")
    p.add_argument("--predictors", default="outcome_path",
                   help="'outcome_path' or comma-separated covariates")
    p.add_argument("--outcome", choices=["log", "level"], default="level")
    p.add_argument("--placebo", choices=["in-space", "random"], default=None)
    p.add_argument("--placebo-samples", type=int, default=10_000)

    p = add("gsynth", cmd_gsynth,
            help="generalized synthetic control (interactive fixed effects)")
    _add_input_args(p)
    _add_treatment_args(p)
    p.add_argument("--treated", help="comma-separated treated city ids")
    p.add_argument("--onset", type=int, default=1300,
                   help="first treated year for --treated lists")
    p.add_argument("--r", default="auto",
                   help="factor count or 'auto' for cross-validation")
    p.add_argument("--r-max", type=int, default=5)
    p.add_argument("--boot", type=int, default=1000)

    p = add("pvar", cmd_pvar, help="panel VAR(1) with Granger tests")
    _add_input_args(p)
    p.add_argument("--vars", required=False,
                   help="comma-separated variables, e.g. log_pop,law_schools")
    p.add_argument("--granger", action="store_true")

    p = add("simulate", cmd_simulate, help="synthetic panels with known truth")
    p.add_argument("--config", help="JSON simulation config")

    return parser


def _thread_limiter(threads):
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise ConfigError("--threads must be a positive integer")
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=threads)
    except ImportError:
        return nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limiter(args.threads):
            summary = args.fn(args, out)
        _write_json(out / f"{args.command.replace('-', '_')}.json", summary)
        json.dump(_jsonable(summary), sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")
        return 0
    except ConfigError as exc:
        _emit_error("config", exc)
        return 3
    except FileNotFoundError as exc:
        # a referenced input file that does not exist is a config problem
        _emit_error("config", exc)
        return 3
    except DataError as exc:
        _emit_error("data", exc)
        return 2
    except EstimatorError as exc:
        _emit_error("estimator", exc)
        return 1


def _emit_error(kind: str, exc: Exception) -> None:
    record = {
        "schema": f"{SCHEMA_PREFIX}.error/{SCHEMA_VERSION}",
        "error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)},
    }
    json.dump(record, sys.stderr, sort_keys=True, indent=2)
    sys.stderr.write("\n")


if __name__ == "__main__":
    sys.exit(main())
