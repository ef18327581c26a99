"""Exception hierarchy shared across the package.

Three broad families map onto the command-line exit codes:

* :class:`DataError` (exit code 2) — the input data violate a structural
  requirement (duplicate cells, off-grid years, negative populations, ...).
* :class:`EstimatorError` (exit code 1) — an estimator cannot produce a
  valid answer on otherwise well-formed data (rank deficiency, separation,
  empty control groups, ...).
* :class:`ConfigError` (exit code 3) — the request itself is malformed.
"""


class CityPanelError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------------------
# Data problems (exit code 2)
# ---------------------------------------------------------------------------


class DataError(CityPanelError):
    """The input data violate a structural requirement."""


class DuplicateCell(DataError):
    """More than one observation for the same (city, year) cell."""


class MissingCell(DataError):
    """A (city, year) cell required for a balanced grid is absent."""


class YearOffGrid(DataError):
    """An observation year does not lie on the century grid."""


class UnknownCity(DataError):
    """An observation references a city with no metadata record."""


class NegativePopulation(DataError):
    """A population value is negative (or not finite)."""


class InconsistentSeries(DataError):
    """An exposure series is positive for a city outside the treatment
    population of the requested rule."""


class EmptyRegion(DataError):
    """A regional aggregate was requested for an empty set of cities."""


class CoincidentCities(DataError):
    """Two distinct cities share identical coordinates where a positive
    distance is required."""


# ---------------------------------------------------------------------------
# Estimation problems (exit code 1)
# ---------------------------------------------------------------------------


class EstimatorError(CityPanelError):
    """An estimator cannot produce a valid answer."""


class RankDeficient(EstimatorError):
    """The design matrix is rank deficient.

    The offending column names are listed in ``columns``.
    """

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"collinear columns: {self.columns}")


class NoVariation(EstimatorError):
    """A regressor is constant within every absorbed group, so its
    coefficient is not identified."""

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(
            message or f"no within-group variation in columns: {self.columns}"
        )


class SingleCluster(EstimatorError):
    """Clustered inference was requested along a dimension with one cluster."""


class SingularRVR(EstimatorError):
    """The restriction covariance R V R' in a Wald test is singular."""


class Separation(EstimatorError):
    """The logit outcome is perfectly separated by the regressors."""


class NonConvergence(EstimatorError):
    """An iterative fit exhausted its iteration budget."""


class SeriesTooShort(EstimatorError):
    """A time series is too short for the requested test."""


class TooFewPrePeriods(EstimatorError):
    """Not enough pre-treatment periods for the requested procedure."""


class NoTreatedUnits(EstimatorError):
    """The treatment schedule contains no treated city."""


class EmptyControl(EstimatorError):
    """No control city is available for a cohort/period contrast."""

    def __init__(self, cohort, period, message=None):
        self.cohort = cohort
        self.period = period
        super().__init__(
            message or f"no control observations for cohort {cohort} at {period}"
        )


class ExtremePropensity(EstimatorError):
    """All control propensities were trimmed away."""


class UnidentifiedFE(EstimatorError):
    """A fixed effect has no untreated cell and cannot be imputed."""


class NoSwitchers(EstimatorError):
    """No switching cohort supports the requested horizon."""

    def __init__(self, horizon, message=None):
        self.horizon = horizon
        super().__init__(message or f"no switcher comparison at horizon {horizon}")


class DegenerateV(EstimatorError):
    """A predictor-weight matrix V is identically zero."""


class WeakInstruments(EstimatorError):
    """The instrument/regressor cross-moment matrix is numerically singular."""

    def __init__(self, condition_number, message=None):
        self.condition_number = condition_number
        super().__init__(
            message
            or f"instrument cross-moment condition number {condition_number:.3e}"
        )


# ---------------------------------------------------------------------------
# Request problems (exit code 3)
# ---------------------------------------------------------------------------


class ConfigError(CityPanelError):
    """The request (CLI arguments or config file) is malformed."""
