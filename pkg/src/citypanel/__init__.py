"""Causal panel analysis of city populations on a century grid.

The package ingests balanced city-by-century population panels, builds
treatment exposures from institution counts and geography, and estimates
long-run institutional effects with a family of mutually checking tools:
triple-difference regressions with multiway-clustered errors, cohort-time
ATT estimators, classical and generalized synthetic control, endogenous
structural-break tests, and a panel VAR.  A simulation module generates
panels with known effects so every estimator can be verified end to end.
"""

__version__ = "0.1.0"

from .breaks import BreakTestResult, ShortSeriesWarning, aggregate_series, zivot_andrews
from .did import (
    AttGtResult,
    DddResult,
    EventStudy,
    ImputationResult,
    SwitcherResult,
    cs_att,
    ddd_dynamic,
    ddd_static,
    dr_did,
    imputation_att,
    ipw_did,
    pct_effect,
    pretrend_test,
    switcher_did,
)
from .errors import (
    CityPanelError,
    ConfigError,
    DataError,
    EstimatorError,
)
from .geo import (
    EARTH_RADIUS_KM,
    RadiusIndexConfig,
    distance_matrix,
    great_circle_km,
    radius_index,
    urban_potential,
)
from .gsynth import FactorModel, GsynthResult, cross_validate_r, fit_factor_model, gsynth_att
from .panel import (
    FULL_YEAR_GRID,
    BalancedPanel,
    CityRecord,
    CovariateVector,
    ExposureVariant,
    PanelObservation,
    Region,
    TreatmentRule,
    TreatmentSchedule,
    build_panel,
    build_treatment,
    load_institutions,
    load_panel_csv,
    log_outcome,
    write_panel_csvs,
)
from .pvar import PvarFit, granger_wald, helmert_transform, pvar1_fit
from .regression import (
    CgmResult,
    DesignSpec,
    FitResult,
    LogitResult,
    WaldResult,
    cgm_vcov,
    logit_fit,
    ols_fit,
    wald_test,
    wald_zero,
    within_transform,
)
from .rng import make_rng
from .simulate import SimulationConfig, SimulationTruth, brute_force_att, simulate_panel
from .synth import (
    PlaceboResult,
    ScmFit,
    ScmProblem,
    build_scm_problem,
    fit_scm,
    fit_weights,
    placebo_inference,
    select_v,
)

__all__ = [name for name in dir() if not name.startswith("_")]
