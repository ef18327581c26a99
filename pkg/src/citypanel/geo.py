"""Great-circle geography: distances, urban potential, radius indices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CoincidentCities, DataError

#: Mean Earth radius in kilometres.
EARTH_RADIUS_KM = 6371.0


def great_circle_km(lat1, lon1, lat2, lon2) -> np.ndarray | float:
    """Haversine great-circle distance in kilometres.

    Accepts scalars or broadcastable arrays of decimal degrees.
    Symmetric, zero on the diagonal, and satisfies the triangle
    inequality up to floating-point rounding.
    """
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    # Clip guards against rounding pushing the argument past 1 for
    # antipodal points.
    c = 2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return EARTH_RADIUS_KM * c


def distance_matrix(latitudes, longitudes) -> np.ndarray:
    """Pairwise great-circle distances, shape ``(n, n)``.

    The diagonal is exactly zero and the matrix exactly symmetric (the
    upper triangle is computed once and mirrored).
    """
    lat = np.asarray(latitudes, dtype=float)
    lon = np.asarray(longitudes, dtype=float)
    n = lat.size
    out = np.zeros((n, n))
    for i in range(n - 1):
        d = great_circle_km(lat[i], lon[i], lat[i + 1 :], lon[i + 1 :])
        out[i, i + 1 :] = d
        out[i + 1 :, i] = d
    return out


def urban_potential(
    populations: np.ndarray,
    distances: np.ndarray,
    interaction: np.ndarray | None = None,
) -> np.ndarray:
    """Distance-weighted sum of other cities' populations.

    For city ``i`` at time ``t``::

        potential[i, t] = sum_{j != i} populations[j, t] / distances[i, j] * I[i, j]

    Parameters
    ----------
    populations : (n, t) array
        City populations (thousands).
    distances : (n, n) array
        Pairwise distances in km; only off-diagonal entries with a nonzero
        interaction weight are used.
    interaction : (n, n) 0/1 array, optional
        Which pairs interact (e.g. "different-religion cities only").
        Defaults to all pairs.

    Raises
    ------
    CoincidentCities
        If two distinct interacting cities sit at distance zero.  The
        division is reported as an error, never clamped.
    """
    pop = np.asarray(populations, dtype=float)
    dist = np.asarray(distances, dtype=float)
    n = pop.shape[0]
    if dist.shape != (n, n):
        raise DataError(f"distance matrix shape {dist.shape}, expected {(n, n)}")
    if interaction is None:
        inter = np.ones((n, n))
    else:
        inter = np.asarray(interaction, dtype=float)
        if inter.shape != (n, n):
            raise DataError("interaction matrix shape mismatch")
    inter = inter.copy()
    np.fill_diagonal(inter, 0.0)

    offdiag = ~np.eye(n, dtype=bool)
    bad = offdiag & (inter != 0) & (dist <= 0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise CoincidentCities(
            f"cities at indices {i} and {j} are coincident (distance 0) "
            "but interact in the potential sum"
        )

    weights = np.zeros((n, n))
    mask = inter != 0
    weights[mask] = inter[mask] / dist[mask]
    return weights @ pop


@dataclass
class RadiusIndexConfig:
    """Configuration for the institution radius index.

    ``radius_km`` counts institutions in cities within that distance;
    ``include_self`` controls whether the city's own count enters (off by
    default).  Cities listed in ``prestige_city_ids`` add
    ``prestige_bonus`` to every city within ``prestige_radius_km`` when
    they have a positive count, reflecting institutions whose pull far
    exceeded their neighbourhood.
    """

    radius_km: float = 300.0
    include_self: bool = False
    prestige_city_ids: tuple[str, ...] = ()
    prestige_radius_km: float = 1500.0
    prestige_bonus: float = 1.0


def radius_index(panel, counts: np.ndarray, config: RadiusIndexConfig | None = None,
                 distances: np.ndarray | None = None) -> np.ndarray:
    """Sum institution counts over cities within a fixed radius.

    Parameters
    ----------
    panel : BalancedPanel
        Supplies coordinates and the city order.
    counts : (n, t) array
        Institution counts per city and year.
    config : RadiusIndexConfig
    distances : optional precomputed (n, n) distance matrix.

    Returns
    -------
    (n, t) array of radius counts, plus prestige bonuses where configured.
    """
    cfg = config or RadiusIndexConfig()
    counts = np.asarray(counts, dtype=float)
    n, t = counts.shape
    if n != panel.n_cities:
        raise DataError("counts row count does not match the panel")
    if distances is None:
        distances = distance_matrix(panel.latitudes(), panel.longitudes())

    within = distances <= cfg.radius_km
    if not cfg.include_self:
        within = within.copy()
        np.fill_diagonal(within, False)
    index = within.astype(float) @ counts

    if cfg.prestige_city_ids:
        prestige_rows = [panel.city_index(cid) for cid in cfg.prestige_city_ids]
        for row in prestige_rows:
            near = distances[row] <= cfg.prestige_radius_km
            if not cfg.include_self:
                near = near.copy()
                near[row] = False
            bonus = cfg.prestige_bonus * (counts[row] > 0).astype(float)
            index[near] += bonus[None, :]
    return index
