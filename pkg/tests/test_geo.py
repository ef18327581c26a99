import math

import numpy as np
import pytest

from citypanel.errors import CoincidentCities, DataError
from citypanel.geo import (
    EARTH_RADIUS_KM,
    RadiusIndexConfig,
    distance_matrix,
    great_circle_km,
    radius_index,
    urban_potential,
)

from conftest import make_panel


class TestGreatCircle:
    def test_quarter_meridian(self):
        d = great_circle_km(0.0, 0.0, 90.0, 0.0)
        assert d == pytest.approx(math.pi / 2.0 * EARTH_RADIUS_KM, abs=1e-9)
        assert d == pytest.approx(10007.543, abs=0.001)

    def test_zero_distance(self):
        assert great_circle_km(48.2, 16.4, 48.2, 16.4) == 0.0

    def test_symmetry_and_antipodes(self):
        assert great_circle_km(10, 20, -30, 40) == pytest.approx(
            great_circle_km(-30, 40, 10, 20), abs=1e-12)
        half = math.pi * EARTH_RADIUS_KM
        assert great_circle_km(0.0, 0.0, 0.0, 180.0) == pytest.approx(half, abs=1e-6)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(11)
        lat = rng.uniform(-90, 90, size=(10_000, 3))
        lon = rng.uniform(-180, 180, size=(10_000, 3))
        ab = great_circle_km(lat[:, 0], lon[:, 0], lat[:, 1], lon[:, 1])
        bc = great_circle_km(lat[:, 1], lon[:, 1], lat[:, 2], lon[:, 2])
        ac = great_circle_km(lat[:, 0], lon[:, 0], lat[:, 2], lon[:, 2])
        assert np.all(ac <= ab + bc + 1e-6)

    def test_matrix_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(5)
        lat = rng.uniform(30, 60, 8)
        lon = rng.uniform(-10, 40, 8)
        d = distance_matrix(lat, lon)
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), np.zeros(8))
        assert d[np.triu_indices(8, 1)].min() > 0


class TestUrbanPotential:
    def test_hand_value(self):
        # one neighbour with population 10 at 100 km: potential = 10/100
        pop = np.array([[0.0], [10.0]])
        dist = np.array([[0.0, 100.0], [100.0, 0.0]])
        pot = urban_potential(pop, dist)
        assert pot[0, 0] == pytest.approx(0.1, abs=1e-15)
        assert pot[1, 0] == pytest.approx(0.0, abs=1e-15)

    def test_excludes_self(self):
        pop = np.array([[50.0], [10.0]])
        dist = np.array([[0.0, 100.0], [100.0, 0.0]])
        pot = urban_potential(pop, dist)
        # own population never enters, no matter how large
        assert pot[0, 0] == pytest.approx(0.1, abs=1e-15)

    def test_homogeneous_in_population(self):
        rng = np.random.default_rng(2)
        pop = rng.uniform(1, 100, size=(6, 3))
        lat, lon = rng.uniform(30, 60, 6), rng.uniform(-10, 40, 6)
        dist = distance_matrix(lat, lon)
        base = urban_potential(pop, dist)
        np.testing.assert_allclose(urban_potential(3.5 * pop, dist), 3.5 * base,
                                   rtol=1e-12)

    def test_interaction_mask(self):
        pop = np.array([[10.0], [10.0], [10.0]])
        dist = np.full((3, 3), 100.0)
        np.fill_diagonal(dist, 0.0)
        inter = np.zeros((3, 3))
        inter[0, 1] = inter[1, 0] = 1.0  # only the first pair interacts
        pot = urban_potential(pop, dist, inter)
        np.testing.assert_allclose(pot[:, 0], [0.1, 0.1, 0.0], atol=1e-15)

    def test_coincident_cities(self):
        pop = np.ones((2, 1))
        dist = np.zeros((2, 2))
        with pytest.raises(CoincidentCities):
            urban_potential(pop, dist)
        # but a coincident *non-interacting* pair is fine
        inter = np.zeros((2, 2))
        pot = urban_potential(pop, dist, inter)
        np.testing.assert_array_equal(pot, np.zeros((2, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            urban_potential(np.ones((2, 1)), np.zeros((3, 3)))


class TestRadiusIndex:
    def _panel(self):
        # chain of cities 1 degree of latitude (~111 km) apart
        coords = [(40.0 + i, 10.0) for i in range(4)]
        return make_panel(np.ones((4, 2)), coords=coords)

    def test_hand_value(self):
        panel = self._panel()
        counts = np.array([[1, 1], [2, 2], [0, 0], [4, 4]], dtype=float)
        idx = radius_index(panel, counts, RadiusIndexConfig(radius_km=150.0))
        # each city sees only its direct neighbours in the chain
        np.testing.assert_allclose(idx[:, 0], [2.0, 1.0, 6.0, 0.0])

    def test_include_self(self):
        panel = self._panel()
        counts = np.array([[1, 1], [2, 2], [0, 0], [4, 4]], dtype=float)
        base = radius_index(panel, counts, RadiusIndexConfig(radius_km=150.0))
        with_self = radius_index(panel, counts,
                                 RadiusIndexConfig(radius_km=150.0, include_self=True))
        np.testing.assert_allclose(with_self, base + counts)

    def test_monotone_in_radius(self):
        panel = self._panel()
        rng = np.random.default_rng(9)
        counts = rng.integers(0, 4, size=(4, 2)).astype(float)
        prev = radius_index(panel, counts, RadiusIndexConfig(radius_km=50.0))
        for r in (150.0, 250.0, 400.0):
            cur = radius_index(panel, counts, RadiusIndexConfig(radius_km=r))
            assert np.all(cur >= prev - 1e-12)
            prev = cur

    def test_prestige_bonus(self):
        panel = self._panel()
        counts = np.array([[1.0, 0.0], [0, 0], [0, 0], [0, 0]])
        cfg = RadiusIndexConfig(radius_km=150.0, prestige_city_ids=("c00",),
                                prestige_radius_km=1000.0, prestige_bonus=2.0)
        idx = radius_index(panel, counts, cfg)
        plain = radius_index(panel, counts, RadiusIndexConfig(radius_km=150.0))
        # bonus applies only in years where the prestige city has a count,
        # and reaches every city within the prestige radius (not itself)
        np.testing.assert_allclose(idx[1:, 0], plain[1:, 0] + 2.0)
        np.testing.assert_allclose(idx[:, 1], plain[:, 1])
        assert idx[0, 0] == plain[0, 0]

    def test_row_count_checked(self):
        panel = self._panel()
        with pytest.raises(DataError):
            radius_index(panel, np.ones((3, 2)))
