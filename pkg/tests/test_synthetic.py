import numpy as np
import pytest

from gridfree.core import parse_iso_date, validate_record
from gridfree.synthetic import (
    SyntheticFieldSpec,
    field_value,
    generate_synthetic,
    make_field_spec,
    place_sites,
)


class TestFieldSpec:
    def test_make_defaults(self):
        spec = make_field_spec()
        assert spec.n_sites == 100 and spec.n_days == 120
        assert spec.n_sources == 3
        assert spec.baseline > 0

    def test_json_round_trip(self):
        spec = make_field_spec(n_sites=10, n_days=5, seed=3,
                               layout="dense_west")
        again = SyntheticFieldSpec.from_json(spec.to_json())
        assert again == spec

    def test_deterministic_for_seed(self):
        assert make_field_spec(seed=5).to_json() == \
            make_field_spec(seed=5).to_json()

    def test_bad_layout_rejected(self):
        with pytest.raises(Exception):
            make_field_spec(layout="hexagonal")


class TestFieldValue:
    def test_baseline_far_from_sources(self):
        spec = make_field_spec(n_sources=1, seed=0)
        # a point far outside the domain sees only the baseline
        v = field_value(spec, 0.0, 0.0, spec.start_date)
        assert v == pytest.approx(spec.baseline, abs=1e-6)

    def test_peak_at_source_center(self):
        spec = make_field_spec(n_sources=1, seed=0)
        lat0, lon0 = spec.sources[0].center_at(0)
        center = field_value(spec, lat0, lon0, spec.start_date)
        rng = np.random.default_rng(1)
        for _ in range(200):
            la = lat0 + rng.uniform(-1.0, 1.0)
            lo = lon0 + rng.uniform(-1.0, 1.0)
            assert field_value(spec, la, lo, spec.start_date) <= center + 1e-9

    def test_drift_moves_peak(self):
        spec = make_field_spec(n_sources=1, seed=0)
        src = spec.sources[0]
        lat0, lon0 = src.center_at(0)
        lat1, lon1 = src.center_at(60)
        assert (lat0, lon0) != (lat1, lon1)
        # on day 60 the plume sits over its new center, not the old one
        day60 = spec.start_date + 60
        assert field_value(spec, lat1, lon1, day60) > \
            field_value(spec, lat0, lon0, day60)

    def test_vectorized_matches_scalar(self):
        spec = make_field_spec(seed=2)
        lats = np.array([39.0, 40.0, 41.0])
        lons = np.array([-111.0, -110.0, -109.0])
        arr = field_value(spec, lats, lons, spec.start_date + 3)
        for i in range(3):
            assert arr[i] == pytest.approx(
                field_value(spec, lats[i], lons[i], spec.start_date + 3),
                rel=1e-12)


class TestGenerate:
    def test_noiseless_reproduces_oracle_exactly(self):
        spec = make_field_spec(n_sites=12, n_days=6, noise_sd=0.0, seed=4)
        records, oracle = generate_synthetic(spec, 4)
        for rec in records:
            assert rec.pm25 == oracle(rec.lat, rec.lon, rec.date)

    def test_record_count_and_validity(self, tiny_spec, tiny_records):
        assert len(tiny_records) == tiny_spec.n_sites * tiny_spec.n_days
        for rec in tiny_records[:200]:
            validate_record(rec)

    def test_deterministic(self, tiny_spec):
        a, _ = generate_synthetic(tiny_spec, 7)
        b, _ = generate_synthetic(tiny_spec, 7)
        assert a == b

    def test_noise_seed_changes_values_not_sites(self, tiny_spec):
        a, _ = generate_synthetic(tiny_spec, 7)
        b, _ = generate_synthetic(tiny_spec, 8)
        assert {r.site_id for r in a} == {r.site_id for r in b}
        assert any(x.pm25 != y.pm25 for x, y in zip(a, b))

    def test_pm25_nonnegative(self, tiny_records):
        assert all(r.pm25 >= 0.0 for r in tiny_records)

    def test_dates_contiguous(self, tiny_spec, tiny_records):
        dates = sorted({r.date for r in tiny_records})
        assert dates[0] == tiny_spec.start_date
        assert len(dates) == tiny_spec.n_days
        assert dates[-1] - dates[0] == tiny_spec.n_days - 1


class TestLayouts:
    def test_dense_west_concentration(self):
        spec = make_field_spec(n_sites=100, layout="dense_west", seed=1)
        sites = place_sites(spec, 1)
        lon_mid = spec.lon_mid
        west = sum(1 for _, la, lo in sites if lo < lon_mid)
        assert west >= 75  # dense_fraction default 0.85 of 100 sites

    def test_two_clusters_bimodal(self):
        spec = make_field_spec(n_sites=100, layout="two_clusters", seed=1)
        sites = place_sites(spec, 1)
        # first half of the ids belongs to one cluster, second to the other;
        # the cluster tails may overlap but the means sit far apart
        half = len(sites) // 2
        lat_a = np.mean([la for _, la, _ in sites[:half]])
        lat_b = np.mean([la for _, la, _ in sites[half:]])
        lon_a = np.mean([lo for _, _, lo in sites[:half]])
        lon_b = np.mean([lo for _, _, lo in sites[half:]])
        assert lon_b - lon_a > 1.0
        assert lat_b - lat_a > 0.8
        west = sum(1 for _, _, lo in sites if lo < spec.lon_mid)
        assert 20 <= west <= 80

    def test_unique_site_ids(self):
        spec = make_field_spec(n_sites=50, seed=2)
        sites = place_sites(spec, 2)
        assert len({sid for sid, _, _ in sites}) == 50

    def test_sites_inside_domain(self):
        spec = make_field_spec(n_sites=80, layout="dense_west", seed=3)
        lat0, lat1, lon0, lon1 = (spec.lat_min, spec.lat_max,
                                  spec.lon_min, spec.lon_max)
        for _, la, lo in place_sites(spec, 3):
            assert lat0 <= la <= lat1 and lon0 <= lo <= lon1
