import math

import numpy as np
import pytest

from gridfree.core import ConfigError, DataError
from gridfree.model import QueryPoint
from gridfree.uncertainty import (
    CV_MEAN_FLOOR,
    PredictionWithUncertainty,
    SubsetPolicy,
    UQRow,
    _aggregate,
    cv_field_rows,
    mc_predict_points,
    uq_table_text,
)


class TestAggregate:
    def test_two_member_hand_values(self):
        out = _aggregate(np.array([2.0, 4.0]))
        assert out.mean == pytest.approx(3.0, abs=1e-15)
        assert out.variance == pytest.approx(2.0, abs=1e-15)
        assert out.cv == pytest.approx(math.sqrt(2.0) / 3.0, abs=1e-15)

    def test_recompute_from_members(self, rng):
        members = rng.uniform(1.0, 30.0, size=10)
        out = _aggregate(members)
        assert out.mean == pytest.approx(float(np.mean(members)), abs=1e-12)
        assert out.variance == pytest.approx(
            float(np.var(members, ddof=1)), abs=1e-12)
        assert out.cv == pytest.approx(
            math.sqrt(out.variance) / out.mean, abs=1e-12)

    def test_variance_order_invariant(self, rng):
        members = rng.uniform(0.5, 20.0, size=8)
        a = _aggregate(members)
        b = _aggregate(members[::-1].copy())
        assert a.variance == pytest.approx(b.variance, abs=1e-15)

    def test_cv_missing_near_zero_mean(self):
        out = _aggregate(np.array([0.0, CV_MEAN_FLOOR]))
        assert math.isnan(out.cv)

    def test_identical_members_zero_variance(self):
        out = _aggregate(np.full(5, 7.25))
        assert out.variance == 0.0
        assert out.cv == 0.0

    def test_fewer_than_two_members_rejected(self):
        with pytest.raises(ConfigError):
            PredictionWithUncertainty(mean=1.0, variance=0.0, cv=0.0,
                                      members=(1.0,))


class TestSubsetPolicy:
    def test_defaults(self):
        p = SubsetPolicy()
        assert p.kind == "gaussian"
        assert p.n_sensors is None and p.sigma is None

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            SubsetPolicy(kind="bootstrap")


class TestCvFieldRows:
    def test_shape_and_determinism(self, tiny_state, tiny_sampler, tiny_cfg,
                                   tiny_scalers, tiny_data):
        queries = tiny_data.split.val[:6]
        a = cv_field_rows(tiny_state.model, tiny_sampler, queries, tiny_cfg,
                          tiny_scalers, m=4, seed=11)
        b = cv_field_rows(tiny_state.model, tiny_sampler, queries, tiny_cfg,
                          tiny_scalers, m=4, seed=11)
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert ra == rb  # NamedTuple equality is exact, bit for bit

    def test_seed_changes_members(self, tiny_state, tiny_sampler, tiny_cfg,
                                  tiny_scalers, tiny_data):
        queries = tiny_data.split.val[:4]
        a = cv_field_rows(tiny_state.model, tiny_sampler, queries, tiny_cfg,
                          tiny_scalers, m=4, seed=1)
        b = cv_field_rows(tiny_state.model, tiny_sampler, queries, tiny_cfg,
                          tiny_scalers, m=4, seed=2)
        assert any(ra.mean != rb.mean for ra, rb in zip(a, b))

    def test_degenerate_policy_zero_variance(self, tiny_state, tiny_sampler,
                                             tiny_cfg, tiny_scalers,
                                             tiny_data):
        queries = tiny_data.split.val[:5]
        rows = cv_field_rows(tiny_state.model, tiny_sampler, queries,
                             tiny_cfg, tiny_scalers, m=4,
                             policy=SubsetPolicy(kind="full"), seed=0)
        for row in rows:
            assert row.variance == 0.0
            assert row.cv == 0.0

    def test_m_below_two_rejected(self, tiny_state, tiny_sampler, tiny_cfg,
                                  tiny_scalers, tiny_data):
        with pytest.raises(ConfigError):
            cv_field_rows(tiny_state.model, tiny_sampler,
                          tiny_data.split.val[:1], tiny_cfg, tiny_scalers,
                          m=1, seed=0)

    def test_mean_convergence_in_m(self, tiny_state, tiny_sampler, tiny_cfg,
                                   tiny_scalers, tiny_data):
        # the MC mean for a fixed query settles as members accumulate:
        # averaged over queries, |mu_M - mu_ref| shrinks with M
        queries = tiny_data.split.val[:8]
        ref = {r for r in ()}
        mus = {}
        for m in (4, 16, 64):
            rows = cv_field_rows(tiny_state.model, tiny_sampler, queries,
                                 tiny_cfg, tiny_scalers, m=m, seed=5)
            mus[m] = np.array([r.mean for r in rows])
        big = cv_field_rows(tiny_state.model, tiny_sampler, queries,
                            tiny_cfg, tiny_scalers, m=256, seed=9)
        ref = np.array([r.mean for r in big])
        gaps = [float(np.mean(np.abs(mus[m] - ref))) for m in (4, 16, 64)]
        assert gaps[2] < gaps[0]


class TestMcPredictPoints:
    def make_points(self, tiny_records, k=3):
        out = []
        for rec in tiny_records[:k]:
            out.append(QueryPoint(lat=rec.lat + 0.01, lon=rec.lon - 0.01,
                                  date=rec.date, land_cover=rec.land_cover,
                                  extras={}))
        return out

    def test_row_per_point(self, tiny_state, tiny_sampler, tiny_cfg,
                           tiny_scalers, tiny_records):
        points = self.make_points(tiny_records)
        rows = mc_predict_points(tiny_state.model, tiny_sampler, points,
                                 tiny_cfg, tiny_scalers, m=4, seed=0)
        assert len(rows) == len(points)
        for row in rows:
            assert row.m == 4
            assert np.isfinite(row.mean)

    def test_no_sensors_on_date_rejected(self, tiny_state, tiny_sampler,
                                         tiny_cfg, tiny_scalers,
                                         tiny_records):
        rec = tiny_records[0]
        point = QueryPoint(lat=rec.lat, lon=rec.lon, date=rec.date + 10000,
                           land_cover=rec.land_cover, extras={})
        with pytest.raises(DataError):
            mc_predict_points(tiny_state.model, tiny_sampler, [point],
                              tiny_cfg, tiny_scalers, m=4, seed=0)


class TestUqTable:
    def rows(self):
        return [
            UQRow(lat=40.0, lon=-110.0, date=17897, mean=12.345678901,
                  variance=0.5, cv=0.0573, m=10),
            UQRow(lat=39.5, lon=-109.5, date=17898, mean=0.05,
                  variance=0.001, cv=float("nan"), m=10),
        ]

    def test_header_and_cardinality(self):
        text = uq_table_text(self.rows())
        lines = text.strip().splitlines()
        assert lines[0] == "lat,lon,date,mean,variance,cv,m"
        assert len(lines) == 3

    def test_nan_cv_serialized_empty(self):
        text = uq_table_text(self.rows())
        last = text.strip().splitlines()[-1]
        fields = last.split(",")
        assert fields[5] == ""

    def test_dates_are_iso(self):
        text = uq_table_text(self.rows())
        assert "2019-01-01" in text  # day 17897
