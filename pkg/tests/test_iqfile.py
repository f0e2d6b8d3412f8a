"""IQ capture file round-trips and sidecar handling."""

import json

import numpy as np
import pytest

from lrfhss import iqfile

RNG = np.random.default_rng(0x10F11E)


def random_samples(n):
    return RNG.standard_normal(n) + 1j * RNG.standard_normal(n)


class TestRoundTrip:
    def test_values_survive_at_float32_precision(self, tmp_path):
        samples = random_samples(257)
        path = tmp_path / "sig.iq"
        iqfile.write_iq(path, samples, sample_rate_hz=125000.0)
        back, doc = iqfile.read_iq(path)
        assert back.dtype == np.complex128
        assert back.shape == samples.shape
        np.testing.assert_allclose(back, samples, rtol=1e-6, atol=1e-6)
        assert doc["sample_rate_hz"] == 125000.0
        assert doc["n_samples"] == 257

    def test_float32_payload_is_exact(self, tmp_path):
        samples = random_samples(64).astype(np.complex64).astype(np.complex128)
        path = tmp_path / "sig.iq"
        iqfile.write_iq(path, samples, sample_rate_hz=3906.25)
        back, _ = iqfile.read_iq(path)
        np.testing.assert_array_equal(back, samples)

    def test_empty_signal(self, tmp_path):
        path = tmp_path / "sig.iq"
        iqfile.write_iq(path, np.zeros(0, complex), sample_rate_hz=1.0)
        back, doc = iqfile.read_iq(path)
        assert back.size == 0
        assert doc["n_samples"] == 0

    def test_meta_round_trip(self, tmp_path):
        path = tmp_path / "sig.iq"
        meta = {"center_freq_offset_hz": 0.0, "note": "loopback"}
        iqfile.write_iq(path, random_samples(8), sample_rate_hz=2.0, meta=meta)
        _, doc = iqfile.read_iq(path)
        assert doc["meta"] == meta


class TestFileLayout:
    def test_interleaved_little_endian_float32(self, tmp_path):
        samples = np.array([1.0 + 2.0j, -3.0 + 0.5j])
        path = tmp_path / "sig.iq"
        iqfile.write_iq(path, samples, sample_rate_hz=10.0)
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(raw, [1.0, 2.0, -3.0, 0.5])

    def test_sidecar_is_json_next_to_data(self, tmp_path):
        path = tmp_path / "sig.iq"
        iqfile.write_iq(path, random_samples(4), sample_rate_hz=48000.0)
        sidecar = iqfile.sidecar_path(path)
        assert sidecar.name == "sig.iq.json"
        doc = json.loads(sidecar.read_text())
        assert doc["format"] == iqfile.FORMAT_NAME
        assert doc["sample_rate_hz"] == 48000.0
        assert doc["n_samples"] == 4


class TestErrors:
    def test_odd_float_count_rejected(self, tmp_path):
        path = tmp_path / "bad.iq"
        np.array([1.0, 2.0, 3.0], dtype="<f4").tofile(path)
        with pytest.raises(ValueError):
            iqfile.read_iq(path)

    def test_missing_sidecar_tolerated(self, tmp_path):
        path = tmp_path / "bare.iq"
        np.array([1.0, 2.0], dtype="<f4").tofile(path)
        samples, doc = iqfile.read_iq(path)
        assert samples.size == 1
        assert doc == {}

    def test_sample_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "sig.iq"
        iqfile.write_iq(path, random_samples(4), sample_rate_hz=1.0)
        np.array([1.0, 2.0], dtype="<f4").tofile(path)
        with pytest.raises(ValueError):
            iqfile.read_iq(path)

    def test_multidim_input_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            iqfile.write_iq(tmp_path / "x.iq", np.zeros((2, 2), complex), 1.0)

    def test_rate_helper(self):
        assert iqfile.sample_rate_of({"sample_rate_hz": 125000.0}) == 125000.0
        assert iqfile.sample_rate_of({}, fallback=8.0) == 8.0
        with pytest.raises(ValueError):
            iqfile.sample_rate_of({})
