"""Receiver-side decoding: headers, payloads, synchronization, packets."""

import numpy as np
import pytest

from lrfhss import channel, detector, modem, packet, profiles, rxchain
from lrfhss.rxchain import CrcFail, DopplerTrack, PacketResult, RxConfig

RNG = np.random.default_rng(0x5EC0DE)

FS8 = 8 * profiles.SYMBOL_RATE_BAUD


def custom(rate="1/3", n_headers=1):
    return profiles.custom_profile(
        ocw_hz=39062.5, grid_hz=3906.25, coding_rate=rate,
        n_headers=n_headers, max_payload_bytes=32)


def random_payload(n=32):
    return RNG.integers(0, 256, n, dtype=np.uint8).tobytes()


def noise(n, rng=RNG):
    return (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)


class TestHeaderDecode:
    @pytest.mark.parametrize("modulation", ["gmsk", "qpsk"])
    def test_loopback_exact(self, modulation):
        prof = custom()
        for _ in range(20):
            phdr = packet.phdr_for(prof, int(RNG.integers(1, 33)),
                                   int(RNG.integers(0, 384)), modulation)
            bits = packet.build_header_block(phdr)
            wave = modem.modulate_block_batch(bits[None], modulation, osf=8)[0]
            assert rxchain.decode_header(wave, modulation, osf=8) == phdr

    def test_loopback_at_channel_series_rate(self):
        prof = custom()
        phdr = packet.phdr_for(prof, 32, 7, "gmsk")
        bits = packet.build_header_block(phdr)
        wave = modem.modulate_block_batch(bits[None], "gmsk", osf=2)[0]
        assert rxchain.decode_header(wave, "gmsk", osf=2) == phdr

    def test_noise_is_rejected_by_crc(self):
        # An 8-bit CRC accepts random bits with probability 2**-8;
        # invalid field encodings reject a further slice.
        n_pass = 0
        for _ in range(256):
            try:
                rxchain.decode_header(noise(912), "gmsk", osf=8)
                n_pass += 1
            except CrcFail:
                pass
        assert n_pass <= 6

    def test_soft_shape_checked(self):
        with pytest.raises(ValueError):
            rxchain.decode_header_soft(np.zeros(80))


class TestPayloadDecode:
    @pytest.mark.parametrize("rate", ["1/3", "2/3"])
    @pytest.mark.parametrize("modulation", ["gmsk", "qpsk"])
    def test_loopback_exact(self, modulation, rate):
        prof = custom(rate)
        for _ in range(5):
            payload = random_payload(int(RNG.integers(1, 33)))
            pkt = packet.build_packet(payload, prof, int(RNG.integers(0, 384)),
                                      modulation)
            waves = modem.modulate_block_batch(pkt.fragment_bits, modulation, osf=8)
            got = rxchain.decode_payload(waves, pkt.phdr, osf=8)
            assert got == payload

    def test_bit_flips_fail_crc(self):
        prof = custom()
        payload = random_payload()
        pkt = packet.build_packet(payload, prof, 5, "gmsk")
        soft = (pkt.fragment_bits.astype(np.float32) * 2 - 1)
        rng = np.random.default_rng(99)
        soft[rng.random(soft.shape) < 0.5] *= -1   # zero mutual information
        with pytest.raises(CrcFail):
            rxchain.decode_payload_soft(soft, pkt.phdr.payload_len,
                                        pkt.phdr.coding_rate)

    def test_missing_fragments_detected(self):
        prof = custom()
        pkt = packet.build_packet(random_payload(), prof, 5, "gmsk")
        soft = (pkt.fragment_bits.astype(np.float32) * 2 - 1)[:-2]
        with pytest.raises(rxchain.MissingFragments):
            rxchain.decode_payload_soft(soft, pkt.phdr.payload_len,
                                        pkt.phdr.coding_rate)


class TestSynchronize:
    def test_zero_track_is_identity(self):
        x = noise(500)
        y = rxchain.synchronize(x, DopplerTrack(), FS8)
        np.testing.assert_array_equal(y, x)

    def test_known_cfo_compensated(self):
        # 7.6 Hz injected, 7.6 Hz track: residual slope < 0.4 Hz.
        x = np.ones(4096, complex)
        s = channel.apply_doppler(x, FS8, 0.0, 7.6)
        y = rxchain.synchronize(s, DopplerTrack(cfo_hz=7.6), FS8)
        phase = np.unwrap(np.angle(y))
        slope = np.polyfit(np.arange(y.size) / FS8, phase, 1)[0]
        assert abs(slope / (2 * np.pi)) < 0.4

    def test_ramp_track_compensated(self):
        x = np.ones(8192, complex)
        s = channel.apply_doppler(x, FS8, 150.0, 3.0)
        y = rxchain.synchronize(
            s, DopplerTrack(cfo_hz=3.0, rate_hz_s=150.0, ref_time_s=0.0), FS8)
        phase = np.unwrap(np.angle(y))
        slope = np.polyfit(np.arange(y.size) / FS8, phase, 1)[0]
        assert abs(slope / (2 * np.pi)) < 0.5

    def test_header_track_predicts_fragments_within_band(self):
        # 200 Hz/s ramp: the track fitted on the header must predict
        # every fragment's offset within 5% of the symbol rate.
        prof = custom()
        pkt = packet.build_packet(random_payload(), prof, 9, "gmsk")
        blocks = modem.synthesize_narrowband(pkt, osf=8)
        stream = np.concatenate([b.samples for b in blocks])
        stream = channel.apply_doppler(stream, FS8, 200.0, 0.0)
        t0, coarse = rxchain.acquire_header(stream, "gmsk")
        hdr_len = blocks[0].samples.size
        hdr = rxchain.synchronize(stream[t0:t0 + hdr_len], coarse, FS8, t0 / FS8)
        refined = rxchain._refine_track(
            coarse, rxchain.header_drift_track(hdr, "gmsk", start_time_s=t0 / FS8))
        for b in blocks[1:]:
            t = (b.start_sample + b.samples.size / 2) / FS8
            predicted = float(refined.cfo_at(t))
            true = 200.0 * t
            assert abs(predicted - true) < 0.05 * profiles.SYMBOL_RATE_BAUD


class TestTrackEstimation:
    @pytest.mark.parametrize("modulation", ["gmsk", "qpsk"])
    def test_block_cfo_estimate(self, modulation):
        prof = custom()
        phdr = packet.phdr_for(prof, 32, 7, modulation)
        bits = packet.build_header_block(phdr)
        wave = modem.modulate_block_batch(bits[None], modulation, osf=8)[0]
        shifted = channel.apply_doppler(wave, FS8, 0.0, 11.0)
        est = float(np.ravel(
            rxchain.estimate_block_cfo(shifted, bits.size, modulation))[0])
        assert abs(est - 11.0) < 1.0

    def test_drift_track_recovers_rate(self):
        prof = custom()
        phdr = packet.phdr_for(prof, 32, 7, "gmsk")
        bits = packet.build_header_block(phdr)
        wave = modem.modulate_block_batch(bits[None], "gmsk", osf=8)[0]
        ramped = channel.apply_doppler(wave, FS8, 15.0, 2.0)
        track = rxchain.header_drift_track(ramped, "gmsk")
        assert abs(track.rate_hz_s - 15.0) < 8.0
        assert abs(float(track.cfo_at(track.ref_time_s))
                   - (2.0 + 15.0 * track.ref_time_s)) < 1.0


class TestNarrowbandReceive:
    @pytest.mark.parametrize("rate", ["1/3", "2/3"])
    @pytest.mark.parametrize("modulation", ["gmsk", "qpsk"])
    def test_impaired_loopback(self, modulation, rate):
        prof = custom(rate)
        for _ in range(5):
            payload = random_payload()
            pkt = packet.build_packet(payload, prof, int(RNG.integers(0, 384)),
                                      modulation)
            stream = np.concatenate(
                [b.samples for b in modem.synthesize_narrowband(pkt, osf=8)])
            cfg = channel.ChannelConfig(
                snr_db=np.inf, doppler_rate=400.0,
                initial_cfo_hz=float(RNG.uniform(-20, 20)),
                timing_offset_eighths=int(RNG.integers(0, 8)))
            impaired = channel.apply_channel(stream, cfg, osf=8, rng=RNG)
            res = rxchain.receive_packet_narrowband(impaired, prof, modulation)
            assert res.header_crc_ok and res.payload_crc_ok
            assert res.payload == payload
            assert res.phdr == pkt.phdr

    def test_replica_redundancy(self):
        # With three header copies, destroying the first one must not
        # cost the packet.
        prof = custom(n_headers=3)
        payload = random_payload()
        pkt = packet.build_packet(payload, prof, 17, "gmsk")
        blocks = modem.synthesize_narrowband(pkt, osf=8)
        stream = np.concatenate([b.samples for b in blocks])
        stream[: blocks[0].samples.size] = 0.0
        res = rxchain.receive_packet_narrowband(stream, prof, "gmsk")
        assert res.payload == payload
        assert res.diagnostics["header_index"] >= 1

    def test_noise_only_never_yields_payload(self):
        prof = custom()
        for _ in range(20):
            res = rxchain.receive_packet_narrowband(noise(4000), prof, "gmsk")
            assert res.payload is None
            assert not res.payload_crc_ok

    def test_deterministic(self):
        prof = custom()
        pkt = packet.build_packet(random_payload(), prof, 31, "gmsk")
        stream = np.concatenate(
            [b.samples for b in modem.synthesize_narrowband(pkt, osf=8)])
        a = rxchain.receive_packet_narrowband(stream, prof, "gmsk")
        b = rxchain.receive_packet_narrowband(stream, prof, "gmsk")
        assert a.payload == b.payload
        assert a.diagnostics["start_sample"] == b.diagnostics["start_sample"]


class TestFullbandReceive:
    MK = detector.DESK_CONFIG.mk
    HOP = detector.DESK_CONFIG.hop

    def fullband_packet(self, modulation, payload, seq, lead_frames=120):
        prof = custom()
        pkt = packet.build_packet(payload, prof, seq, modulation)
        stream = modem.synthesize_fullband(
            pkt, self.MK, pad_blocks=(lead_frames * self.HOP, 40 * self.HOP))
        return prof, stream

    @pytest.mark.parametrize("modulation", ["gmsk", "qpsk"])
    def test_clean_packet(self, modulation):
        payload = random_payload()
        prof, stream = self.fullband_packet(modulation, payload, 12)
        cfg = RxConfig(profile=prof, modulation=modulation)
        res = rxchain.receive_packet(stream, cfg)
        assert res.payload == payload
        assert res.header_crc_ok and res.payload_crc_ok
        assert len(res.events_used) == 1

    def test_doppler_ramp_at_high_snr(self):
        payload = random_payload()
        prof, stream = self.fullband_packet("gmsk", payload, 44)
        stream = channel.apply_doppler(stream, self.MK * profiles.SYMBOL_RATE_BAUD,
                                       400.0, 0.0)
        stream = channel.add_awgn(stream, 30.0, self.MK,
                                  np.random.default_rng(3), signal_power=1.0)
        cfg = RxConfig(profile=prof, modulation="gmsk")
        res = rxchain.receive_packet(stream, cfg)
        assert res.payload == payload

    def test_noise_only_one_second(self):
        prof = custom()
        cfg = RxConfig(profile=prof, modulation="gmsk")
        rng = np.random.default_rng(17)
        n = int(self.MK * profiles.SYMBOL_RATE_BAUD)   # one second
        for _ in range(3):
            res = rxchain.receive_packet(noise(n, rng), cfg)
            assert res.payload is None

    def test_deterministic(self):
        payload = random_payload()
        prof, stream = self.fullband_packet("gmsk", payload, 80)
        cfg = RxConfig(profile=prof, modulation="gmsk")
        a = rxchain.receive_packet(stream, cfg)
        b = rxchain.receive_packet(stream, cfg)
        assert a.payload == b.payload == payload
        assert a.events_used == b.events_used


class TestPacketResult:
    def test_payload_requires_header(self):
        with pytest.raises(ValueError):
            PacketResult(payload=b"x", header_crc_ok=False)

    def test_empty_result_allowed(self):
        res = PacketResult()
        assert res.phdr is None and res.payload is None
