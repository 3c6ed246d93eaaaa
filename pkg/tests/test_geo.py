import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfree.core import DataError
from gridfree.geo import (
    EARTH_RADIUS_KM,
    HEX_AREA_KM2_RES8,
    AxialHexGrid,
    aggregate_scalar_to_hex,
    aggregate_wind_to_hex,
    encode_latlon,
    encode_latlon_array,
    fourier_encode,
    fourier_encode_array,
    haversine_km,
    hex_index,
)

finite_lat = st.floats(min_value=-90, max_value=90, allow_nan=False)
finite_lon = st.floats(min_value=-180, max_value=180, allow_nan=False)


class TestEncodeLatLon:
    def test_origin(self):
        c = encode_latlon(0.0, 0.0)
        assert (c.x, c.y, c.z) == pytest.approx((1.0, 0.0, 0.0), abs=1e-15)

    def test_north_pole(self):
        c = encode_latlon(90.0, 0.0)
        assert (c.x, c.y, c.z) == pytest.approx((0.0, 0.0, 1.0), abs=1e-15)

    def test_45_45(self):
        c = encode_latlon(45.0, 45.0)
        assert c.x == pytest.approx(0.5, abs=1e-12)
        assert c.y == pytest.approx(0.5, abs=1e-12)
        assert c.z == pytest.approx(math.sqrt(2) / 2, abs=1e-12)

    @given(finite_lat, finite_lon)
    @settings(max_examples=200, deadline=None)
    def test_unit_norm(self, lat, lon):
        c = encode_latlon(lat, lon)
        assert abs(c.x * c.x + c.y * c.y + c.z * c.z - 1.0) < 1e-12

    def test_out_of_range(self):
        with pytest.raises(DataError):
            encode_latlon(91.0, 0.0)
        with pytest.raises(DataError):
            encode_latlon(0.0, -181.0)

    def test_array_matches_scalar(self):
        lats = np.array([0.0, 45.0, -30.0])
        lons = np.array([0.0, 45.0, 120.0])
        arr = encode_latlon_array(lats, lons)
        for i in range(3):
            c = encode_latlon(lats[i], lons[i]).as_array()
            assert np.allclose(arr[i], c, atol=1e-15)


class TestFourierEncode:
    def test_zero_input(self):
        enc = fourier_encode(0.0, 4, 2.0)
        assert np.allclose(enc[:4], 0.0)
        assert np.allclose(enc[4:], 1.0)

    def test_quarter_period_single_band(self):
        enc = fourier_encode(0.5, 1, 2.0)  # x = P/4
        assert enc == pytest.approx([1.0, 0.0], abs=1e-15)

    def test_term_by_term(self):
        x, nf, period = 0.3, 4, 2.0
        enc = fourier_encode(x, nf, period)
        for n in range(1, nf + 1):
            angle = 2.0 * math.pi * n * x / period
            assert enc[n - 1] == pytest.approx(math.sin(angle), abs=1e-15)
            assert enc[nf + n - 1] == pytest.approx(math.cos(angle), abs=1e-15)

    @given(st.floats(min_value=-10, max_value=10, allow_nan=False))
    @settings(max_examples=100, deadline=None)
    def test_periodicity(self, x):
        a = fourier_encode(x, 3, 2.0)
        b = fourier_encode(x + 2.0, 3, 2.0)
        assert np.allclose(a, b, atol=1e-9)

    def test_components_bounded(self):
        enc = fourier_encode(123.456, 8, 2.0)
        assert np.all(np.abs(enc) <= 1.0)

    def test_array_layout(self):
        vals = np.array([[0.1, 0.2, 0.3]])
        out = fourier_encode_array(vals, 2, 2.0)
        assert out.shape == (1, 12)
        # per-scalar blocks: [sin1 sin2 cos1 cos2] for each of the 3 inputs
        expected = np.concatenate([fourier_encode(v, 2, 2.0)
                                   for v in vals[0]])
        assert np.allclose(out[0], expected, atol=1e-15)


class TestHaversine:
    def test_identity(self):
        assert haversine_km(40.0, -105.0, 40.0, -105.0) == 0.0

    def test_antipodal(self):
        d = haversine_km(0.0, 0.0, 0.0, 180.0)
        assert d == pytest.approx(math.pi * EARTH_RADIUS_KM, rel=1e-12)

    def test_one_degree_latitude(self):
        d = haversine_km(40.0, -105.0, 41.0, -105.0)
        assert d == pytest.approx(math.pi * EARTH_RADIUS_KM / 180.0, rel=1e-9)
        assert d == pytest.approx(111.2, abs=0.1)

    @given(finite_lat, finite_lon, finite_lat, finite_lon)
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, lat1, lon1, lat2, lon2):
        a = haversine_km(lat1, lon1, lat2, lon2)
        b = haversine_km(lat2, lon2, lat1, lon1)
        assert abs(a - b) < 1e-9

    def test_triangle_inequality(self, rng):
        for _ in range(100):
            p = rng.uniform([-60, -170], [60, 170], size=(3, 2))
            ab = haversine_km(*p[0], *p[1])
            bc = haversine_km(*p[1], *p[2])
            ac = haversine_km(*p[0], *p[2])
            assert ac <= ab + bc + 1e-6


class TestHexGrid:
    def test_deterministic(self):
        a = hex_index(40.123, -111.456, 8)
        b = hex_index(40.123, -111.456, 8)
        assert a == b

    def test_distant_points_distinct(self):
        a = hex_index(40.0, -110.0, 8)
        b = hex_index(49.0, -110.0, 8)  # ~1000 km north
        assert a != b

    def test_resolution_changes_cell(self):
        a = hex_index(40.0, -110.0, 8)
        b = hex_index(40.0, -110.0, 3)
        assert a.resolution == 8 and b.resolution == 3

    def test_invalid_resolution(self):
        with pytest.raises(DataError):
            hex_index(40.0, -110.0, 16)
        with pytest.raises(DataError):
            hex_index(40.0, -110.0, -1)

    def test_centroid_round_trip(self):
        grid = AxialHexGrid()
        cell = hex_index(40.2, -110.7, 8, grid)
        lat_c, lon_c = grid.centroid(cell)
        assert hex_index(lat_c, lon_c, 8, grid) == cell

    def test_area_scale(self):
        # resolution-8 cells should be ~0.74 km^2; nearby distinct points
        # inside one cell share ids
        assert HEX_AREA_KM2_RES8 == pytest.approx(0.737327598)
        a = hex_index(40.0, -110.0, 8)
        b = hex_index(40.0001, -110.0001, 8)  # ~14 m away
        assert a == b

    def test_coarse_cells_nest_more_points(self, rng):
        pts = rng.uniform([39, -111], [41, -109], size=(200, 2))
        fine = {hex_index(la, lo, 8).id for la, lo in pts}
        coarse = {hex_index(la, lo, 3).id for la, lo in pts}
        assert len(coarse) < len(fine)


class TestScalarAggregation:
    def test_single_cell_identity(self):
        assert aggregate_scalar_to_hex([(5.0, 1.0)]) == 5.0

    def test_symmetric_mean(self):
        assert aggregate_scalar_to_hex([(0.0, 1.0), (10.0, 1.0)]) == 5.0

    def test_weighted_mean(self):
        got = aggregate_scalar_to_hex([(2.0, 0.3), (8.0, 0.7)])
        assert got == pytest.approx(6.2, abs=1e-12)

    def test_weight_rescaling_invariance(self, rng):
        vals = rng.uniform(0, 50, size=12)
        weights = rng.uniform(0.1, 2.0, size=12)
        cells = list(zip(vals, weights))
        scaled = list(zip(vals, weights * 37.5))
        assert aggregate_scalar_to_hex(cells) == pytest.approx(
            aggregate_scalar_to_hex(scaled), rel=1e-12)

    def test_zero_weights_error(self):
        with pytest.raises(DataError):
            aggregate_scalar_to_hex([(1.0, 0.0), (2.0, 0.0)])


def wind_oracle(entries):
    """Independent U/V recomputation with plain Python floats."""
    sw = sum(w for _, _, w in entries)
    u = sum(w * s * math.sin(math.radians(d)) for s, d, w in entries) / sw
    v = sum(w * s * math.cos(math.radians(d)) for s, d, w in entries) / sw
    speed = math.hypot(u, v)
    direction = math.degrees(math.atan2(u, v)) % 360.0
    return speed, direction


class TestWindAggregation:
    def test_single_entry_identity(self):
        got = aggregate_wind_to_hex([(3.0, 90.0, 1.0)])
        assert got.speed == pytest.approx(3.0, abs=1e-12)
        assert got.direction == pytest.approx(90.0, abs=1e-9)
        assert not got.calm

    def test_circular_mean_across_north(self):
        # naive direction averaging would give 180; the truth is 0
        got = aggregate_wind_to_hex([(1.0, 350.0, 1.0), (1.0, 10.0, 1.0)])
        assert got.speed == pytest.approx(math.cos(math.radians(10.0)),
                                          abs=1e-12)
        assert 0.0 <= got.direction < 360.0
        wrapped = min(got.direction, 360.0 - got.direction)
        assert wrapped == pytest.approx(0.0, abs=1e-9)

    def test_exact_cancellation_is_calm(self):
        # zero-speed entries cancel exactly in float arithmetic
        got = aggregate_wind_to_hex([(0.0, 123.0, 1.0), (0.0, 45.0, 2.0)])
        assert got.speed == 0.0
        assert got.direction == 0.0
        assert got.calm

    def test_near_cancellation_is_not_calm(self):
        # sin(pi) is not exactly zero, so opposing unit vectors leave a
        # sub-ulp residual rather than an exact zero
        got = aggregate_wind_to_hex([(1.0, 0.0, 1.0), (1.0, 180.0, 1.0)])
        assert got.speed == pytest.approx(0.0, abs=1e-15)
        assert not got.calm
        assert 0.0 <= got.direction < 360.0

    def test_output_speed_bounded_by_max_input(self, rng):
        for _ in range(200):
            n = rng.integers(1, 8)
            entries = [(float(rng.uniform(0, 20)),
                        float(rng.uniform(0, 360)),
                        float(rng.uniform(0.1, 2)))
                       for _ in range(n)]
            got = aggregate_wind_to_hex(entries)
            assert got.speed <= max(s for s, _, _ in entries) + 1e-9

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 10))
            entries = [(float(rng.uniform(0, 25)),
                        float(rng.uniform(0, 360)),
                        float(rng.uniform(0.05, 3)))
                       for _ in range(n)]
            got = aggregate_wind_to_hex(entries)
            speed, direction = wind_oracle(entries)
            assert got.speed == pytest.approx(speed, abs=1e-9)
            if not got.calm:
                delta = abs(got.direction - direction) % 360.0
                assert min(delta, 360.0 - delta) < 1e-6

    def test_zero_weights_error(self):
        with pytest.raises(DataError):
            aggregate_wind_to_hex([(1.0, 90.0, 0.0)])
