"""Channelizer, block store, and header-detector behavior.

Oracle strategy: the channelizer is checked against a literal
direct-sum DFT evaluated with Python loops; the block store against a
plain list of frames; detection events against synthetic injections at
known channels, offsets, and CFOs.
"""

import numpy as np
import pytest

from lrfhss import channel, detector, modem, packet, profiles
from lrfhss.detector import (
    DESK_CONFIG,
    FULL_SCALE_CONFIG,
    BlockStore,
    ChannelizerConfig,
    DetectorConfig,
    Evicted,
    RateMismatch,
)

RNG = np.random.default_rng(0xDE7EC7)

PROFILE = profiles.custom_profile(
    ocw_hz=39062.5,
    grid_hz=3906.25,
    coding_rate="1/3",
    n_headers=1,
    max_payload_bytes=32,
)


def noise(shape, rng=RNG):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def direct_sum_frames(samples, cfg):
    """Literal windowed-DFT oracle: one frame per half-window hop."""
    w = cfg.window()
    n_frames = detector.frame_count(samples.size, cfg)
    out = np.zeros((n_frames, cfg.mk), complex)
    for f in range(n_frames):
        for m in range(cfg.mk):
            acc = 0.0 + 0.0j
            for k in range(cfg.window_len):
                acc += w[k] * samples[f * cfg.hop + k] * np.exp(-2j * np.pi * k * m / cfg.mk)
            out[f, m] = acc
    return out


def header_wave(modulation, osf):
    phdr = packet.phdr_for(PROFILE, 32, 7, modulation)
    bits = packet.build_header_block(phdr)
    return modem.modulate_block_batch(bits[None, :], modulation, osf=osf)[0]


def inject_tone_stream(cfg, obw_channel, wave, delay_frames, timing_eighths=0, tail_frames=40):
    """Place `wave` on an OBW channel starting at an output-frame delay."""
    ofs = delay_frames * cfg.hop + timing_eighths * (cfg.mk // 8)
    stream = np.zeros(ofs + wave.size + tail_frames * cfg.hop, complex)
    m = ofs + np.arange(wave.size)
    stream[ofs : ofs + wave.size] = wave * np.exp(2j * np.pi * obw_channel * m / cfg.mk)
    return stream


class TestChannelizerConfig:
    def test_desk_geometry(self):
        cfg = DESK_CONFIG
        assert cfg.n_channels == 128
        assert cfg.bins_per_channel == 2
        assert cfg.window_len == 16
        assert cfg.mk == 256
        assert cfg.hop == 128
        assert cfg.input_rate_hz == 125000.0  # exactly

    def test_full_scale_geometry(self):
        cfg = FULL_SCALE_CONFIG
        assert cfg.mk == 8192
        assert cfg.input_rate_hz == 4e6

    def test_output_series_rate(self):
        # Two output samples per symbol regardless of scale.
        assert detector.SERIES_RATE_HZ == 2 * profiles.SYMBOL_RATE_BAUD
        assert DESK_CONFIG.input_rate_hz / DESK_CONFIG.hop == detector.SERIES_RATE_HZ

    def test_window_is_symmetric(self):
        w = DESK_CONFIG.window()
        np.testing.assert_array_equal(w, w[::-1])
        assert w.dtype == np.float64

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(n_channels=0),
            dict(bins_per_channel=0),
            dict(window_len=0),
            dict(n_channels=4, bins_per_channel=2, window_len=16),  # window > mk
            dict(window_coeffs=(1.0, 2.0)),  # wrong length
            dict(window_coeffs=tuple(float(i) for i in range(16))),  # asymmetric
        ],
    )
    def test_bad_configs_rejected(self, kwargs):
        base = dict(n_channels=128, bins_per_channel=2, window_len=16)
        base.update(kwargs)
        with pytest.raises(ValueError):
            ChannelizerConfig(**base)


class TestChannelizeOracle:
    def test_matches_direct_sum_dft(self):
        cfg = ChannelizerConfig(n_channels=8, bins_per_channel=2, window_len=16)
        for _ in range(20):
            n = int(RNG.integers(cfg.window_len, 6 * cfg.hop))
            samples = noise(n)
            got = detector.channelize_array(samples, cfg)
            want = direct_sum_frames(samples, cfg)
            assert got.shape == want.shape
            if want.size:
                err = np.abs(got - want).max() / np.abs(want).max()
                assert err < 1e-9

    def test_linearity(self):
        cfg = DESK_CONFIG
        a, b = noise(5 * cfg.hop), noise(5 * cfg.hop)
        fa = detector.channelize_array(a, cfg)
        fb = detector.channelize_array(b, cfg)
        fab = detector.channelize_array(2.0 * a + 3j * b, cfg)
        np.testing.assert_allclose(fab, 2.0 * fa + 3j * fb, rtol=0, atol=1e-9 * np.abs(fa).max())

    def test_frame_count_short_input(self):
        cfg = DESK_CONFIG
        assert detector.frame_count(cfg.window_len - 1, cfg) == 0
        assert detector.frame_count(cfg.window_len, cfg) == 1
        assert detector.frame_count(cfg.window_len + cfg.hop, cfg) == 2
        assert detector.channelize_array(noise(3), cfg).shape == (0, cfg.mk)

    def test_tone_lands_on_its_channel_bin(self):
        cfg = DESK_CONFIG
        for ch in [0, 3, 17, 63]:
            m = np.arange(40 * cfg.hop)
            tone = np.exp(2j * np.pi * (2 * ch) * m / cfg.mk)  # channel center = bin 2*ch
            frames = detector.channelize_array(tone, cfg)
            assert (np.abs(frames).argmax(axis=1) == 2 * ch).all()

    def test_even_bin_tone_has_constant_frames(self):
        cfg = DESK_CONFIG
        m = np.arange(20 * cfg.hop)
        tone = np.exp(2j * np.pi * 6 * m / cfg.mk)
        series = detector.channelize_array(tone, cfg)[:, 6]
        np.testing.assert_allclose(series, series[0], rtol=1e-12)

    def test_odd_bin_tone_alternates_sign(self):
        cfg = DESK_CONFIG
        m = np.arange(20 * cfg.hop)
        tone = np.exp(2j * np.pi * 7 * m / cfg.mk)
        series = detector.channelize_array(tone, cfg)[:, 7]
        np.testing.assert_allclose(series[1::2], -series[0::2][: series[1::2].size], rtol=1e-12)
        fixed = detector.derotate_bin_series(series, 7, first_frame=0)
        np.testing.assert_allclose(fixed, fixed[0], rtol=1e-12)

    def test_derotation_uses_absolute_frame_index(self):
        series = noise(10)
        whole = detector.derotate_bin_series(series, 3, first_frame=0)
        shifted = detector.derotate_bin_series(series[4:], 3, first_frame=4)
        np.testing.assert_array_equal(shifted, whole[4:])

    def test_rate_mismatch_rejected(self):
        with pytest.raises(RateMismatch):
            detector.channelize_array(noise(512), DESK_CONFIG, sample_rate_hz=1e6)
        # Exact rate accepted.
        detector.channelize_array(noise(512), DESK_CONFIG, sample_rate_hz=125000.0)

    def test_channelize_frames_are_indexed_in_order(self):
        frames = detector.channelize(noise(6 * DESK_CONFIG.hop), DESK_CONFIG)
        assert [f.time_index for f in frames] == list(range(len(frames)))

    def test_channelize_bins_picks_columns(self):
        samples = noise(8 * DESK_CONFIG.hop)
        full = detector.channelize_array(samples, DESK_CONFIG)
        sub = detector.channelize_bins(samples, DESK_CONFIG, [5, 64, 200])
        np.testing.assert_allclose(sub, full[:, [5, 64, 200]], rtol=1e-12, atol=1e-12)

    def test_zero_input_zero_output(self):
        frames = detector.channelize_array(np.zeros(1024, complex), DESK_CONFIG)
        assert frames.size and not frames.any()


class TestBlockStore:
    def test_round_trip(self):
        cfg = DESK_CONFIG
        store = BlockStore(cfg, capacity=64)
        frames = noise((10, cfg.mk))
        store.store_frames(frames)
        np.testing.assert_array_equal(store.frequency_region(0, 10), frames)
        np.testing.assert_array_equal(store.fetch_time_series(5, 0, 10), frames[:, 10])

    def test_randomized_ring_against_list_oracle(self):
        cfg = ChannelizerConfig(n_channels=8, bins_per_channel=2, window_len=8)
        store = BlockStore(cfg, capacity=17)
        log = []
        rng = np.random.default_rng(99)
        for _ in range(40):
            chunk = noise((int(rng.integers(1, 9)), cfg.mk), rng)
            store.store_frames(chunk)
            log.extend(chunk)
            assert store.next_index == len(log)
            assert store.first_index == max(0, len(log) - 17)
            lo = store.first_index
            for _ in range(3):
                start = int(rng.integers(lo, len(log) + 1))
                count = int(rng.integers(0, len(log) - start + 1))
                got = store.frequency_region(start, count)
                np.testing.assert_array_equal(got, np.array(log[start : start + count]).reshape(count, cfg.mk))
        with pytest.raises(Evicted):
            store.frequency_region(store.first_index - 1, 2)
        with pytest.raises(Evicted):
            store.frequency_region(store.next_index - 1, 2)

    def test_out_of_order_frames_rejected(self):
        store = BlockStore(DESK_CONFIG, capacity=8)
        store.store_frames(detector.channelize(noise(3 * 128 + 16), DESK_CONFIG))
        bad = [detector.SpectralFrame(time_index=7, bin_values=noise(256))]
        with pytest.raises(ValueError):
            store.store_frames(bad)

    def test_fetch_time_series_is_channel_column(self):
        cfg = DESK_CONFIG
        store = BlockStore(cfg, capacity=32)
        frames = noise((12, cfg.mk))
        store.store_frames(frames)
        for ch in [0, 7, 127]:
            np.testing.assert_array_equal(
                store.fetch_time_series(ch, 2, 8), frames[2:10, ch * cfg.bins_per_channel]
            )
        with pytest.raises(ValueError):
            store.fetch_time_series(128, 0, 1)

    def test_fetch_bin_series_derotates_with_absolute_index(self):
        cfg = DESK_CONFIG
        store = BlockStore(cfg, capacity=8)
        frames = noise((12, cfg.mk))
        store.store_frames(frames)  # frames 0..11, retained 4..11
        raw = store.fetch_bin_series(9, 5, 4)
        np.testing.assert_array_equal(raw, frames[5:9, 9])
        fixed = store.fetch_bin_series(9, 5, 4, derotate=True)
        signs = (-1.0) ** (np.arange(5, 9))
        np.testing.assert_array_equal(fixed, frames[5:9, 9] * signs)


class TestDetectorConfig:
    def test_natural_correlator_lengths(self):
        assert detector.sync_taps("gmsk") == 64
        assert detector.sync_taps("qpsk") == 32
        assert detector.preamble_series_samples("gmsk") == 4
        assert detector.preamble_series_samples("qpsk") == 2

    def test_search_window_samples(self):
        assert DetectorConfig(modulation="gmsk", search_interval_bits=48).search_window_samples == 96
        assert DetectorConfig(modulation="qpsk", search_interval_bits=48).search_window_samples == 48
        assert DetectorConfig(modulation="gmsk", search_interval_bits=12).search_window_samples == 24

    def test_fine_bin_resolution(self):
        cfg = DetectorConfig(modulation="gmsk", fft_len=128)
        assert cfg.fine_bin_hz == pytest.approx(7.62939453125, abs=0)

    def test_default_thresholds_per_modulation(self):
        assert DetectorConfig(modulation="gmsk").threshold == detector.default_threshold("gmsk")
        assert DetectorConfig(modulation="qpsk").threshold == detector.default_threshold("qpsk")
        with pytest.raises(ValueError):
            detector.default_threshold("fsk")

    def test_bad_configs_rejected(self):
        with pytest.raises(ValueError):
            DetectorConfig(modulation="gmsk", window_len=32)  # must match syncword span
        with pytest.raises(ValueError):
            DetectorConfig(modulation="gmsk", fft_len=32)  # shorter than correlator
        with pytest.raises(ValueError):
            DetectorConfig(modulation="gmsk", threshold=0.0)
        with pytest.raises(ValueError):
            DetectorConfig(modulation="gmsk", threshold=1.5)
        with pytest.raises(ValueError):
            DetectorConfig(modulation="gmsk", search_interval_bits=0)


def detect_on_stream(stream, chan_cfg=DESK_CONFIG, modulation="gmsk", channels=None, **det_kwargs):
    store = BlockStore(chan_cfg, capacity=detector.frame_count(stream.size, chan_cfg))
    store.store_frames(detector.channelize_array(stream, chan_cfg))
    det_cfg = DetectorConfig(modulation=modulation, **det_kwargs)
    return detector.detect_headers(store, det_cfg, channels=channels)


class TestDetection:
    def test_clean_header_event_on_odd_channel(self):
        wave = header_wave("gmsk", DESK_CONFIG.mk)
        stream = inject_tone_stream(DESK_CONFIG, 5, wave, delay_frames=1000)
        events = detect_on_stream(stream, channels=[2, 3])
        hits = [e for e in events if e.channel_index == 5]
        assert len(hits) == 1
        ev = hits[0]
        assert abs(ev.sample_index - 1000) <= 1
        assert abs(ev.fine_cfo_hz) < detector.FINE_BIN_HZ
        assert 0.5 < ev.peak_power <= 1.0

    def test_clean_header_event_on_even_channel(self):
        wave = header_wave("gmsk", DESK_CONFIG.mk)
        stream = inject_tone_stream(DESK_CONFIG, 8, wave, delay_frames=250)
        events = detect_on_stream(stream, channels=[4])
        assert [e.channel_index for e in events] == [8]
        assert abs(events[0].sample_index - 250) <= 1

    def test_full_scan_alias_structure(self):
        # The 16-tap analysis window leaks a scalar-scaled copy of the
        # series into neighboring channels, so a noiseless full scan also
        # fires on even-offset aliases; all events must sit at the true
        # time offset and at channels 5 +/- 2k, with channel 5 present.
        wave = header_wave("gmsk", DESK_CONFIG.mk)
        stream = inject_tone_stream(DESK_CONFIG, 5, wave, delay_frames=300)
        events = detect_on_stream(stream)
        channels = {e.channel_index for e in events}
        assert 5 in channels
        assert all(c % 2 == 1 for c in channels)
        strong = [e for e in events if e.peak_power > 0.5]
        assert strong and all(abs(e.sample_index - 300) <= 1 for e in strong)

    def test_channel_shift_covariance(self):
        # Shifting the carrier by one channel spacing relabels the event.
        wave = header_wave("gmsk", DESK_CONFIG.mk)
        s5 = inject_tone_stream(DESK_CONFIG, 5, wave, delay_frames=120)
        m = np.arange(s5.size)
        s7 = s5 * np.exp(2j * np.pi * 2 * m / DESK_CONFIG.mk)
        e5 = detect_on_stream(s5, channels=[2, 3])
        e7 = detect_on_stream(s7, channels=[3, 4])
        ch5 = [e for e in e5 if e.channel_index == 5]
        ch7 = [e for e in e7 if e.channel_index == 7]
        assert len(ch5) == 1 and len(ch7) == 1
        assert ch5[0].sample_index == ch7[0].sample_index
        assert ch7[0].peak_power == pytest.approx(ch5[0].peak_power, rel=1e-6)

    def test_small_cfo_lands_in_fine_estimate(self):
        wave = header_wave("gmsk", DESK_CONFIG.mk)
        stream = inject_tone_stream(DESK_CONFIG, 6, wave, delay_frames=100)
        stream = channel.apply_doppler(stream, DESK_CONFIG.input_rate_hz, 0.0, 30.0)
        events = detect_on_stream(stream, channels=[3])
        hits = [e for e in events if e.channel_index == 6]
        assert len(hits) == 1
        assert abs(hits[0].fine_cfo_hz - 30.0) <= detector.FINE_BIN_HZ

    def test_qpsk_header_detected(self):
        wave = header_wave("qpsk", DESK_CONFIG.mk)
        stream = inject_tone_stream(DESK_CONFIG, 9, wave, delay_frames=180)
        events = detect_on_stream(stream, modulation="qpsk", channels=[4, 5])
        hits = [e for e in events if e.channel_index == 9]
        assert len(hits) == 1
        assert abs(hits[0].sample_index - 180) <= 1

    def test_doppler_ramp_still_detected(self):
        wave = header_wave("gmsk", DESK_CONFIG.mk)
        stream = inject_tone_stream(DESK_CONFIG, 5, wave, delay_frames=140)
        stream = channel.apply_doppler(stream, DESK_CONFIG.input_rate_hz, 400.0, 0.0)
        events = detect_on_stream(stream, channels=[2, 3])
        assert any(e.channel_index == 5 and abs(e.sample_index - 140) <= 1 for e in events)

    def test_zero_input_no_events(self):
        stream = np.zeros(400 * DESK_CONFIG.hop, complex)
        assert detect_on_stream(stream) == []

    def test_statistic_is_normalized(self):
        series = noise((3, 400))
        cfg = DetectorConfig(modulation="gmsk")
        scan = detector.scan_series(series, DESK_CONFIG, cfg)
        stat = scan["peak_power"]
        assert (stat >= 0).all() and (stat <= 1.0 + 1e-12).all()

    def test_batched_scan_matches_loop(self):
        series = noise((4, 300))
        cfg = DetectorConfig(modulation="gmsk")
        batched = detector.scan_series(series, DESK_CONFIG, cfg)
        for i in range(4):
            single = detector.scan_series(series[i], DESK_CONFIG, cfg)
            np.testing.assert_array_equal(batched["accept"][i], single["accept"][0])
            np.testing.assert_allclose(batched["peak_power"][i], single["peak_power"][0], rtol=1e-12)


class TestObwResolution:
    def test_fine_within_half_channel_keeps_bin(self):
        obw, res = detector.resolve_obw_channel(10, 200.0)
        assert obw == 10 and res == 200.0

    def test_fine_past_half_channel_moves_bin(self):
        obw, res = detector.resolve_obw_channel(10, 500.0)
        assert obw == 11
        assert res == pytest.approx(500.0 - profiles.SYMBOL_RATE_BAUD)
        obw, res = detector.resolve_obw_channel(10, -500.0)
        assert obw == 9
        assert res == pytest.approx(-500.0 + profiles.SYMBOL_RATE_BAUD)

    def test_vectorized(self):
        obw, res = detector.resolve_obw_channel(np.array([4, 4]), np.array([0.0, 490.0]))
        np.testing.assert_array_equal(obw, [4, 5])


class TestFalseAlarms:
    @pytest.mark.parametrize("modulation", ["gmsk", "qpsk"])
    def test_no_accepts_on_pure_noise_at_default_threshold(self, modulation):
        # ~49 channel-seconds of independent noise-only series per
        # modulation; the default thresholds were calibrated for
        # a much lower event rate, so zero accepts are expected.
        rng = np.random.default_rng(0xFA11A)
        cfg = DetectorConfig(modulation=modulation)
        total = 0
        for _ in range(4):
            series = noise((8, 1500), rng)
            scan = detector.scan_series(series, DESK_CONFIG, cfg)
            total += int(scan["accept"].sum())
        assert total == 0

    def test_weak_noise_scaling_invariance(self):
        # The statistic is scale-free: scaling the series must not
        # change which positions are accepted.
        rng = np.random.default_rng(7)
        series = noise(2000, rng)
        cfg = DetectorConfig(modulation="gmsk", threshold=0.05)
        a = detector.scan_series(series, DESK_CONFIG, cfg)["accept"]
        b = detector.scan_series(series * 1e-6, DESK_CONFIG, cfg)["accept"]
        np.testing.assert_array_equal(a, b)
