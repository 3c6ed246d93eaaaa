import json

import numpy as np
import pytest

from gridfree.artifacts import (
    atomic_write_bytes,
    decode_array,
    encode_array,
    load_artifact,
    save_artifact,
)
from gridfree.core import DataError


class TestArrayCodec:
    @pytest.mark.parametrize("arr", [
        np.arange(12, dtype=np.float64).reshape(3, 4),
        np.array([], dtype=np.float64),
        np.array([[1, -2], [3, 4]], dtype=np.int64),
        np.linspace(-1e300, 1e300, 7),
        np.array([np.pi]),
    ])
    def test_round_trip_bitwise(self, arr):
        out = decode_array(encode_array(arr))
        assert out.dtype == arr.dtype
        assert out.shape == arr.shape
        assert np.array_equal(
            out.view(np.uint8) if out.size else out,
            arr.view(np.uint8) if arr.size else arr,
        )

    def test_float32_upcast(self):
        out = decode_array(encode_array(np.ones(3, dtype=np.float32)))
        assert out.dtype == np.float64

    def test_nan_and_inf_preserved(self):
        arr = np.array([np.nan, np.inf, -np.inf, 0.0])
        out = decode_array(encode_array(arr))
        assert np.isnan(out[0]) and np.isposinf(out[1]) and np.isneginf(out[2])


class TestArtifactFile:
    def payload(self):
        return {
            "weights": {"w1": np.eye(3), "b": np.zeros(3)},
            "meta": {"name": "demo", "count": 5, "ratio": 0.25},
            "flags": [True, False, None],
        }

    def test_save_load_round_trip(self, tmp_path):
        path = tmp_path / "m.json"
        save_artifact(path, "demo-kind", self.payload(), "abc123", 7)
        doc = load_artifact(path, expected_kind="demo-kind")
        assert doc["config_hash"] == "abc123"
        assert doc["seed"] == 7
        assert np.array_equal(doc["payload"]["weights"]["w1"], np.eye(3))
        assert doc["payload"]["meta"]["count"] == 5

    def test_kind_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        save_artifact(path, "kind-a", {}, "h", 0)
        with pytest.raises(DataError):
            load_artifact(path, expected_kind="kind-b")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_artifact(tmp_path / "nope.json")

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            load_artifact(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.json"
        save_artifact(path, "k", {}, "h", 0)
        doc = json.loads(path.read_text())
        doc["format_version"] = 999
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError):
            load_artifact(path)

    def test_byte_stable(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        save_artifact(a, "k", self.payload(), "h", 3)
        save_artifact(b, "k", self.payload(), "h", 3)
        assert a.read_bytes() == b.read_bytes()

    def test_no_tmp_leftover(self, tmp_path):
        atomic_write_bytes(tmp_path / "x.bin", b"data")
        names = {p.name for p in tmp_path.iterdir()}
        assert names == {"x.bin"}
