"""Packet reception: header decoding, payload decoding, synchronization.

Two entry paths share the soft-decision decoders:

* `receive_packet` consumes a full-band capture.  It channelizes the
  band, stores the frames, runs the header detector, and tries to
  decode every candidate event CRC-first — an 8-bit CRC passes random
  bits with probability 2**-8, so false candidates are cheap to reject
  and the surviving header gates everything downstream.

* `receive_packet_narrowband` consumes one dehopped stream at 8
  samples/symbol.  It acquires the known header prefix by segmented
  correlation, bootstraps a carrier-drift track from the header, and
  predicts each fragment's frequency from the track before handing the
  fragment to the demodulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import coding, modem, packet
from .detector import (
    DESK_CONFIG,
    SERIES_RATE_HZ,
    BlockStore,
    ChannelizerConfig,
    DetectionEvent,
    DetectorConfig,
    Evicted,
    channelize_array,
    detect_headers,
    preamble_series_samples,
    sync_series_reference,
    sync_taps,
)
from .profiles import SYMBOL_RATE_BAUD, DataRateProfile, coded_payload_bits

__all__ = [
    "CrcFail",
    "MissingFragments",
    "DopplerTrack",
    "PacketResult",
    "RxConfig",
    "decode_header_soft",
    "decode_header",
    "decode_payload_soft",
    "decode_payload",
    "estimate_block_cfo",
    "header_drift_track",
    "synchronize",
    "acquire_header",
    "receive_packet_narrowband",
    "receive_packet",
]

SOFT_QUANT_BITS = 4

_KNOWN_PREFIX_BITS = np.concatenate([packet.PREAMBLE_BITS, packet.SYNCWORD_BITS])
_HEADER_FIELD_BITS = packet.PHDR_BITS + packet.PHDR_CRC_BITS   # 40


class CrcFail(Exception):
    """A decoded block failed its checksum (or parsed to invalid fields)."""


class MissingFragments(Exception):
    """The capture does not cover every fragment of the hopping plan."""


# ---------------------------------------------------------------------------
# Carrier-drift track
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DopplerTrack:
    """Linear carrier-offset model f(t) = cfo_hz + rate_hz_s*(t - ref_time_s)."""

    cfo_hz: float = 0.0
    rate_hz_s: float = 0.0
    ref_time_s: float = 0.0

    def cfo_at(self, t_s):
        return self.cfo_hz + self.rate_hz_s * (np.asarray(t_s, dtype=float) - self.ref_time_s)


def synchronize(samples: np.ndarray, track: DopplerTrack,
                sample_rate_hz: float, start_time_s: float = 0.0) -> np.ndarray:
    """Remove the track's carrier ramp from a block of samples.

    `start_time_s` is the time of the block's first sample on the
    track's clock; the quadratic phase model integrates the track's
    linear frequency trajectory.
    """
    samples = np.asarray(samples)
    t = start_time_s + np.arange(samples.shape[-1]) / float(sample_rate_hz)
    dt = t - track.ref_time_s
    phase = 2.0 * np.pi * (track.cfo_hz * dt + 0.5 * track.rate_hz_s * dt * dt)
    return samples * np.exp(-1j * phase)


# ---------------------------------------------------------------------------
# Soft-decision decoders (shared by both paths and by the harness)
# ---------------------------------------------------------------------------

def decode_header_soft(soft_block: np.ndarray) -> packet.Phdr:
    """Decode one header block's 114 soft bit values (positive = 1).

    Drops the known preamble/syncword positions, deinterleaves,
    runs the tail-biting rate-1/2 decoder, and checks the CRC8.
    """
    soft_block = np.asarray(soft_block, dtype=np.float32)
    if soft_block.shape != (packet.HEADER_BLOCK_BITS,):
        raise ValueError(
            f"expected {packet.HEADER_BLOCK_BITS} soft values, got {soft_block.shape}")
    coded = packet.header_coded_view(soft_block)
    coded = coding.deinterleave(coded)
    coded = coding.quantize_soft(coded, SOFT_QUANT_BITS)[0]
    bits = coding.viterbi_decode(coded, _HEADER_FIELD_BITS, "1/2")
    field_bits, crc_bits = bits[:packet.PHDR_BITS], bits[packet.PHDR_BITS:]
    if coding.crc8(field_bits) != coding.bits_to_int(crc_bits):
        raise CrcFail("header CRC8 mismatch")
    try:
        return packet.Phdr.from_bits(field_bits)
    except ValueError as exc:            # reserved/invalid field encodings
        raise CrcFail(f"header fields invalid: {exc}") from exc


def decode_header(samples: np.ndarray, modulation: str = packet.MODULATION_GMSK,
                  osf: int = modem.OSF_NARROWBAND,
                  duration_scale: int = 1) -> packet.Phdr:
    """Demodulate and decode one symbol-aligned header block."""
    soft = modem.demodulate_block_batch(
        np.atleast_2d(samples), packet.HEADER_BLOCK_BITS, modulation, osf,
        duration_scale)[0]
    return decode_header_soft(soft)


def decode_payload_soft(fragment_soft: np.ndarray, payload_len: int,
                        coding_rate) -> bytes:
    """Decode (n_fragments, 50) soft bit values into payload bytes."""
    fragment_soft = np.atleast_2d(np.asarray(fragment_soft, dtype=np.float32))
    if fragment_soft.shape[1] != packet.FRAGMENT_BLOCK_BITS:
        raise ValueError("fragments must have 50 bit positions")
    n_coded = coded_payload_bits(payload_len, coding_rate)
    stream = packet.assemble_stream(fragment_soft, n_coded)
    if stream.size != n_coded:
        raise MissingFragments(
            f"{fragment_soft.shape[0]} fragments cover {stream.size} coded bits, "
            f"need {n_coded}")
    stream = coding.deinterleave(stream)
    stream = coding.quantize_soft(stream, SOFT_QUANT_BITS)[0]
    n_info = 8 * payload_len + 16      # payload plus its CRC16
    bits = coding.viterbi_decode(stream, n_info, coding_rate)
    data_bits, crc_bits = bits[:8 * payload_len], bits[8 * payload_len:]
    if coding.crc16(data_bits) != coding.bits_to_int(crc_bits):
        raise CrcFail("payload CRC16 mismatch")
    return coding.bits_to_bytes(data_bits)


def decode_payload(fragment_samples: np.ndarray, phdr: packet.Phdr,
                   osf: int = modem.OSF_NARROWBAND,
                   duration_scale: int = 1) -> bytes:
    """Demodulate (n_fragments, samples) aligned fragments and decode."""
    soft = modem.demodulate_block_batch(
        np.atleast_2d(fragment_samples), packet.FRAGMENT_BLOCK_BITS,
        phdr.modulation, osf, duration_scale)
    return decode_payload_soft(soft, phdr.payload_len, phdr.coding_rate)


# ---------------------------------------------------------------------------
# Carrier estimation on demodulator lattices
# ---------------------------------------------------------------------------

def _lattice_order(modulation: str) -> int:
    return 2 if modulation == packet.MODULATION_GMSK else 4


def _block_lattice(samples: np.ndarray, n_bits: int, modulation: str,
                   osf: int, duration_scale: int) -> np.ndarray:
    """Symbol-rate lattice whose order-n power strips the modulation."""
    samples = np.atleast_2d(samples)
    if modulation == packet.MODULATION_GMSK:
        y = modem.gmsk_pseudosymbols_batch(samples, n_bits, osf)
        k = np.arange(n_bits)
        return y * np.power(-1j, k + 1)
    n_sym = modem.block_symbol_count(n_bits, modulation)
    return modem.qpsk_matched_symbols_batch(samples, n_sym, osf, duration_scale)


def _lattice_cfo(lattice: np.ndarray, order: int, search_hz: float) -> np.ndarray:
    """Two-stage residual-offset estimate (blind, then decision-stripped)."""
    lat = np.atleast_2d(lattice)
    k = np.arange(lat.shape[1])
    f1 = modem.estimate_residual_cfo(lat, order, search_hz)
    d = lat * np.exp(-2j * np.pi * np.outer(f1 / SYMBOL_RATE_BAUD, k))
    phi = np.angle(np.sum(np.power(d, order), axis=1)) / order
    w = d * np.exp(-1j * phi)[:, None]
    if order == 2:
        hard = np.where(w.real >= 0, 1.0 + 0j, -1.0 + 0j)
    else:
        hard = np.exp(0.5j * np.pi * np.round(np.angle(w) / (0.5 * np.pi)))
    tone = d * np.conj(hard)
    f2 = modem.estimate_residual_cfo(tone, 1, search_hz)
    return f1 + f2


def estimate_block_cfo(samples: np.ndarray, n_bits: int, modulation: str,
                       osf: int = modem.OSF_NARROWBAND,
                       duration_scale: int = 1,
                       search_hz: float = 25.0) -> np.ndarray:
    """Residual carrier offset of symbol-aligned blocks, in Hz."""
    lat = _block_lattice(samples, n_bits, modulation, osf, duration_scale)
    return _lattice_cfo(lat, _lattice_order(modulation), search_hz)


def header_drift_track(header_samples: np.ndarray, modulation: str,
                       osf: int = modem.OSF_NARROWBAND,
                       duration_scale: int = 1,
                       start_time_s: float = 0.0,
                       search_hz: float = 25.0) -> DopplerTrack:
    """Fit a linear carrier track to one header block's two halves.

    The residual offset is estimated independently on each half of the
    symbol lattice; the pair pins a line.  Estimates are residuals on
    top of whatever compensation was already applied to the samples.
    """
    lat = _block_lattice(np.atleast_2d(header_samples),
                         packet.HEADER_BLOCK_BITS, modulation, osf,
                         duration_scale)[0]
    n = lat.size
    half = n // 2
    order = _lattice_order(modulation)
    f_pair = _lattice_cfo(np.stack([lat[:half], lat[n - half:]]), order, search_hz)
    # Half centers on the block clock (symbol spacing 1/baud).
    c1 = 0.5 * half / SYMBOL_RATE_BAUD
    c2 = (n - 0.5 * half) / SYMBOL_RATE_BAUD
    rate = (float(f_pair[1]) - float(f_pair[0])) / (c2 - c1)
    mid = 0.5 * (c1 + c2)
    return DopplerTrack(
        cfo_hz=float(np.mean(f_pair)),
        rate_hz_s=rate,
        ref_time_s=start_time_s + mid,
    )


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PacketResult:
    """Outcome of one packet reception attempt."""

    phdr: packet.Phdr | None = None
    payload: bytes | None = None
    header_crc_ok: bool = False
    payload_crc_ok: bool = False
    events_used: tuple[DetectionEvent, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.payload is not None and not (self.phdr is not None and self.header_crc_ok):
            raise ValueError("payload requires a CRC-checked header")


# ---------------------------------------------------------------------------
# Narrowband (dehopped) reception
# ---------------------------------------------------------------------------

def _known_prefix_wave(modulation: str, osf: int, duration_scale: int) -> np.ndarray:
    return modem.modulate_block_batch(
        _KNOWN_PREFIX_BITS[None, :], modulation, osf, duration_scale)[0]


def acquire_header(stream: np.ndarray, modulation: str,
                   osf: int = modem.OSF_NARROWBAND,
                   duration_scale: int = 1,
                   search_span: int = 64,
                   n_segments: int = 16) -> tuple[int, DopplerTrack]:
    """Locate the header prefix and fit a coarse carrier track.

    Correlates the known 34-bit prefix waveform over candidate integer
    offsets with a drift-tolerant segmented statistic, then fits a
    quadratic phase model to the winning offset's segment phases.
    Returns (start_sample, coarse_track); the track's reference time is
    on the stream clock.
    """
    stream = np.asarray(stream)
    ref = _known_prefix_wave(modulation, osf, duration_scale)
    n_ref = ref.size
    span = min(search_span, stream.size - n_ref)
    if span < 1:
        raise ValueError("stream shorter than the header prefix")
    windows = np.lib.stride_tricks.sliding_window_view(stream[: span + n_ref - 1 + 1], n_ref)
    prods = windows[:span] * np.conj(ref)
    seg = prods[:, : (n_ref // n_segments) * n_segments]
    seg = seg.reshape(span, n_segments, -1).sum(axis=2)
    score = np.abs(seg).sum(axis=1)
    t0 = int(np.argmax(score))
    fs = float(osf) * SYMBOL_RATE_BAUD
    seg_len = n_ref // n_segments
    centers = (np.arange(n_segments) + 0.5) * seg_len / fs
    phases = np.unwrap(np.angle(seg[t0]))
    # LS fit: phase ~ a + 2*pi*f*t + pi*r*t^2
    basis = np.stack([np.ones_like(centers), centers, centers ** 2], axis=1)
    a, f_term, r_term = np.linalg.lstsq(basis, phases, rcond=None)[0]
    track = DopplerTrack(
        cfo_hz=f_term / (2.0 * np.pi),
        rate_hz_s=r_term / np.pi,
        ref_time_s=t0 / fs,
    )
    return t0, track


def _refine_track(track: DopplerTrack, residual: DopplerTrack) -> DopplerTrack:
    """Compose a residual track (same clock) onto a base track."""
    rate = track.rate_hz_s + residual.rate_hz_s
    cfo_at_ref = float(track.cfo_at(residual.ref_time_s)) + residual.cfo_hz
    return DopplerTrack(cfo_hz=cfo_at_ref, rate_hz_s=rate,
                        ref_time_s=residual.ref_time_s)


def receive_packet_narrowband(stream: np.ndarray, profile: DataRateProfile,
                              modulation: str = packet.MODULATION_GMSK,
                              osf: int = modem.OSF_NARROWBAND,
                              duration_scale: int = 1,
                              search_span: int | None = None) -> PacketResult:
    """Decode one packet from a dehopped stream at `osf` samples/symbol."""
    stream = np.asarray(stream)
    fs = float(osf) * SYMBOL_RATE_BAUD
    scale = duration_scale if modulation == packet.MODULATION_QPSK else 1
    hdr_len = modem.block_sample_count(packet.HEADER_BLOCK_BITS, modulation, osf, scale)
    frag_len = modem.block_sample_count(packet.FRAGMENT_BLOCK_BITS, modulation, osf, scale)
    diagnostics: dict = {}

    if search_span is None:
        # Cover every header replica so a damaged first copy still
        # leaves an acquirable prefix.
        search_span = (profile.n_headers - 1) * hdr_len + 64
    try:
        t0, track = acquire_header(stream, modulation, osf, scale, search_span)
    except ValueError:
        return PacketResult(diagnostics={"error": "acquisition failed"})
    # The prefix that won the correlation may belong to any replica;
    # replicas are contiguous equal-length blocks, so the quotient
    # identifies which one, and the remainder is the packet start.
    latched = min(t0 // hdr_len, profile.n_headers - 1)
    packet_start = t0 - latched * hdr_len
    diagnostics["start_sample"] = packet_start
    diagnostics["latched_header"] = latched

    phdr = None
    hdr_index = 0
    for h in range(latched, profile.n_headers):
        start = packet_start + h * hdr_len
        if start + hdr_len > stream.size:
            break
        hdr = synchronize(stream[start : start + hdr_len], track, fs, start / fs)
        residual = header_drift_track(hdr, modulation, osf, scale,
                                      start_time_s=start / fs)
        candidate = _refine_track(track, residual)
        hdr = synchronize(stream[start : start + hdr_len], candidate, fs, start / fs)
        try:
            phdr = decode_header(hdr, modulation, osf, scale)
        except CrcFail:
            continue
        track = candidate
        hdr_index = h
        break
    if phdr is None:
        return PacketResult(diagnostics=diagnostics | {"error": "no header decoded"})

    diagnostics["track"] = track
    diagnostics["header_index"] = hdr_index
    n_frag = -(-coded_payload_bits(phdr.payload_len, phdr.coding_rate)
               // packet.FRAGMENT_CODED_BITS)
    frag0 = packet_start + profile.n_headers * hdr_len
    end = frag0 + n_frag * frag_len
    if end > stream.size:
        # A timing shift pushes the packet a few samples past the
        # capture edge; tolerate a sub-symbol shortfall with zero-fill.
        if end - stream.size > 2 * osf:
            return PacketResult(
                phdr=phdr, header_crc_ok=True,
                diagnostics=diagnostics | {"error": "stream ends inside payload"})
        stream = np.concatenate([stream, np.zeros(end - stream.size, stream.dtype)])
    frags = stream[frag0:end].reshape(n_frag, frag_len)
    starts = (frag0 + frag_len * np.arange(n_frag)) / fs
    t = starts[:, None] + np.arange(frag_len)[None, :] / fs
    dt = t - track.ref_time_s
    phase = 2.0 * np.pi * (track.cfo_hz * dt + 0.5 * track.rate_hz_s * dt * dt)
    frags = frags * np.exp(-1j * phase)
    try:
        payload = decode_payload(frags, phdr, osf, scale)
    except CrcFail:
        return PacketResult(phdr=phdr, header_crc_ok=True, diagnostics=diagnostics)
    return PacketResult(phdr=phdr, payload=payload, header_crc_ok=True,
                        payload_crc_ok=True, diagnostics=diagnostics)


def receive_packet_aligned(stream: np.ndarray, profile: DataRateProfile,
                           modulation: str = packet.MODULATION_GMSK,
                           osf: int = modem.OSF_NARROWBAND,
                           duration_scale: int = 1) -> PacketResult:
    """Decode a block-aligned dehopped stream with no synchronization.

    The stream must start exactly at the first header replica with no
    carrier or timing error — the transmit chain's own output, or a
    capture aligned by outside knowledge.  Header replicas are tried
    in order; the payload follows the replica section.
    """
    stream = np.asarray(stream)
    scale = duration_scale if modulation == packet.MODULATION_QPSK else 1
    hdr_len = modem.block_sample_count(packet.HEADER_BLOCK_BITS, modulation,
                                       osf, scale)
    frag_len = modem.block_sample_count(packet.FRAGMENT_BLOCK_BITS,
                                        modulation, osf, scale)
    diagnostics: dict = {"start_sample": 0}
    phdr = None
    for h in range(profile.n_headers):
        start = h * hdr_len
        if start + hdr_len > stream.size:
            break
        try:
            phdr = decode_header(stream[start:start + hdr_len], modulation,
                                 osf, scale)
        except CrcFail:
            continue
        diagnostics["header_index"] = h
        break
    if phdr is None:
        return PacketResult(diagnostics=diagnostics | {"error": "no header decoded"})
    n_frag = -(-coded_payload_bits(phdr.payload_len, phdr.coding_rate)
               // packet.FRAGMENT_CODED_BITS)
    frag0 = profile.n_headers * hdr_len
    end = frag0 + n_frag * frag_len
    if end > stream.size:
        return PacketResult(
            phdr=phdr, header_crc_ok=True,
            diagnostics=diagnostics | {"error": "stream ends inside payload"})
    frags = stream[frag0:end].reshape(n_frag, frag_len)
    try:
        payload = decode_payload(frags, phdr, osf, scale)
    except CrcFail:
        return PacketResult(phdr=phdr, header_crc_ok=True,
                            diagnostics=diagnostics)
    return PacketResult(phdr=phdr, payload=payload, header_crc_ok=True,
                        payload_crc_ok=True, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Full-band reception
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RxConfig:
    """Configuration for full-band packet reception."""

    profile: DataRateProfile
    modulation: str = packet.MODULATION_GMSK
    chan_cfg: ChannelizerConfig = DESK_CONFIG
    det_cfg: DetectorConfig | None = None
    duration_scale: int = 1
    max_events: int = 32

    def detector_config(self) -> DetectorConfig:
        if self.det_cfg is not None:
            return self.det_cfg
        return DetectorConfig(modulation=self.modulation)


def _series_block_lengths(modulation: str) -> tuple[int, int]:
    """Header and fragment lengths in channel-series samples."""
    return (
        2 * modem.block_symbol_count(packet.HEADER_BLOCK_BITS, modulation),
        2 * modem.block_symbol_count(packet.FRAGMENT_BLOCK_BITS, modulation),
    )


def _fetch_series(store: BlockStore, channel: int, start: int, count: int,
                  cfo_hz: float, rate_hz_s: float = 0.0,
                  t0_s: float = 0.0) -> np.ndarray:
    """Fetch a derotated bin series and strip a carrier ramp from it."""
    series = store.fetch_bin_series(channel, start, count, derotate=True)
    t = t0_s + np.arange(count) / SERIES_RATE_HZ
    phase = 2.0 * np.pi * (cfo_hz * t + 0.5 * rate_hz_s * t * t)
    return series * np.exp(-1j * phase)


def _series_prefix_track(header_series: np.ndarray, modulation: str,
                         chan_cfg: ChannelizerConfig,
                         n_segments: int = 8) -> DopplerTrack:
    """Residual carrier track from the header's known-prefix series.

    Correlates the preamble/syncword span of a fetched header series
    against its reference, then fits a quadratic phase model to the
    segment phases.  Effective over much stronger ramps than the
    half-lattice method because each segment is short.
    """
    ref = sync_series_reference(modulation, chan_cfg)
    pre = preamble_series_samples(modulation)
    taps = sync_taps(modulation)
    prods = header_series[pre : pre + taps] * np.conj(ref)
    seg_len = taps // n_segments
    seg = prods[: seg_len * n_segments].reshape(n_segments, seg_len).sum(axis=1)
    centers = (pre + (np.arange(n_segments) + 0.5) * seg_len) / SERIES_RATE_HZ
    phases = np.unwrap(np.angle(seg))
    basis = np.stack([np.ones_like(centers), centers, centers ** 2], axis=1)
    _, f_term, r_term = np.linalg.lstsq(basis, phases, rcond=None)[0]
    rate = r_term / np.pi
    f0 = f_term / (2.0 * np.pi)
    mid = centers.mean()
    return DopplerTrack(cfo_hz=f0 + rate * mid, rate_hz_s=rate, ref_time_s=mid)


def receive_packet(samples: np.ndarray, cfg: RxConfig,
                   sample_rate_hz: float | None = None) -> PacketResult:
    """Channelize, detect, and decode one packet from a full-band capture."""
    chan = cfg.chan_cfg
    frames = channelize_array(samples, chan, sample_rate_hz)
    store = BlockStore(chan, capacity=max(1, frames.shape[0]))
    store.store_frames(frames)
    det_cfg = cfg.detector_config()
    events = detect_headers(store, det_cfg)
    events = sorted(events, key=lambda e: -e.peak_power)[: cfg.max_events]
    return decode_from_store(store, events, cfg)


def decode_from_store(store: BlockStore, events: Sequence[DetectionEvent],
                      cfg: RxConfig) -> PacketResult:
    """Decode the first event whose header checks out, then its payload."""
    mod = cfg.modulation
    hdr_len, frag_len = _series_block_lengths(mod)
    diagnostics: dict = {"n_events": len(events)}

    for ev in events:
        # Two-pass drift bootstrap: a strong carrier ramp (LEO passes
        # reach hundreds of Hz/s) exceeds the demodulator's pull-in
        # range over a whole header, so fit the ramp on the short
        # known-prefix segments first, compensate, then refine on the
        # full header lattice.
        track = DopplerTrack(cfo_hz=ev.fine_cfo_hz)
        try:
            hdr = _fetch_series(store, ev.channel_index, ev.sample_index,
                                hdr_len, track.cfo_hz)
            boot = _series_prefix_track(hdr, mod, store.config)
            track = _refine_track(track, boot)
            hdr = _fetch_series(store, ev.channel_index, ev.sample_index,
                                hdr_len, track.cfo_hz, track.rate_hz_s,
                                t0_s=-track.ref_time_s)
            residual = header_drift_track(
                hdr, mod, osf=modem.OSF_CHANNEL,
                duration_scale=cfg.duration_scale)
            track = _refine_track(track, residual)
            hdr = _fetch_series(store, ev.channel_index, ev.sample_index,
                                hdr_len, track.cfo_hz, track.rate_hz_s,
                                t0_s=-track.ref_time_s)
        except (Evicted, ValueError):
            continue
        try:
            phdr = decode_header(hdr, mod, osf=modem.OSF_CHANNEL,
                                 duration_scale=cfg.duration_scale)
        except CrcFail:
            continue
        result = _decode_payload_from_plan(store, ev, phdr, track, cfg)
        if result is not None:
            return result
    return PacketResult(diagnostics=diagnostics)


def _decode_payload_from_plan(store: BlockStore, ev: DetectionEvent,
                              phdr: packet.Phdr, track: DopplerTrack,
                              cfg: RxConfig) -> PacketResult | None:
    mod = cfg.modulation
    hdr_len, frag_len = _series_block_lengths(mod)
    n_frag = -(-coded_payload_bits(phdr.payload_len, phdr.coding_rate)
               // packet.FRAGMENT_CODED_BITS)
    n_blocks = cfg.profile.n_headers + n_frag
    try:
        plan = packet.hopping_plan(cfg.profile, phdr.seq_id, n_blocks)
    except ValueError:
        return None
    diagnostics = {"track": track, "plan": plan}
    replicas = [j for j in range(cfg.profile.n_headers)
                if plan[j] == ev.channel_index]
    if not replicas:
        return None
    best: PacketResult | None = None
    for j in replicas:
        frag0 = ev.sample_index + (cfg.profile.n_headers - j) * hdr_len
        soft = np.empty((n_frag, packet.FRAGMENT_BLOCK_BITS), dtype=np.float32)
        # Anchor list for the drift line fit: seed it with the header's
        # two half estimates (re-expressed as two points on the track),
        # then add each fragment's measured residual so the rate
        # estimate tightens as the horizon grows.
        quarter = 0.25 * hdr_len / SERIES_RATE_HZ
        anchors_t = [track.ref_time_s - quarter, track.ref_time_s + quarter]
        anchors_f = [float(track.cfo_at(t)) for t in anchors_t]
        try:
            for i in range(n_frag):
                start = frag0 + i * frag_len
                t_start = (start - ev.sample_index) / SERIES_RATE_HZ
                if len(anchors_t) > 2:
                    rate_fit, f_ref = np.polyfit(anchors_t, anchors_f, 1)
                else:
                    rate_fit = track.rate_hz_s
                    f_ref = track.cfo_hz - rate_fit * track.ref_time_s
                f_start = f_ref + rate_fit * t_start
                series = _fetch_series(
                    store, int(plan[cfg.profile.n_headers + i]), start, frag_len,
                    cfo_hz=f_start, rate_hz_s=rate_fit)
                resid = float(np.asarray(estimate_block_cfo(
                    series, packet.FRAGMENT_BLOCK_BITS, mod,
                    osf=modem.OSF_CHANNEL,
                    duration_scale=cfg.duration_scale)).reshape(-1)[0])
                t_mid = t_start + 0.5 * frag_len / SERIES_RATE_HZ
                anchors_t.append(t_mid)
                anchors_f.append(f_start + rate_fit * (t_mid - t_start) + resid)
                soft[i] = modem.demodulate_block_batch(
                    series[None, :], packet.FRAGMENT_BLOCK_BITS, mod,
                    modem.OSF_CHANNEL, cfg.duration_scale)[0]
        except (Evicted, ValueError):
            continue
        try:
            payload = decode_payload_soft(soft, phdr.payload_len, phdr.coding_rate)
        except CrcFail:
            best = best or PacketResult(
                phdr=phdr, header_crc_ok=True, events_used=(ev,),
                diagnostics=diagnostics)
            continue
        return PacketResult(phdr=phdr, payload=payload, header_crc_ok=True,
                            payload_crc_ok=True, events_used=(ev,),
                            diagnostics=diagnostics)
    return best
