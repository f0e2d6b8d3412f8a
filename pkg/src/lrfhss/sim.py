"""Monte Carlo harness: header miss-detection and packet-error sweeps.

The harness drives the transmit chain, channel, detector and decoders
over grids of SNR, Doppler rate and timing offset, and reduces each
point to a failure rate with a Wilson 95% confidence interval.  Work
is split into fixed-size batches with per-batch derived seeds, so a
report is byte-identical for a given master seed regardless of how
many worker threads ran the batches.

The environment variable ``LRFHSS_SEED``, when set, overrides the
configured master seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import channel, detector, packet
from .coding import (conv_encode_batch, crc8_batch, crc16_batch,
                     deinterleave, interleave, quantize_soft,
                     viterbi_decode_batch)
from .detector import (DESK_CONFIG, ChannelizerConfig, DetectorConfig,
                       resolve_obw_channel, scan_series, window_matrix)
from .modem import (block_symbol_count, demodulate_block_batch,
                    modulate_block_batch)
from .packet import MODULATION_GMSK, MODULATION_QPSK
from .profiles import (SYMBOL_RATE_BAUD, DataRateProfile, custom_profile,
                       fragment_count, normalize_coding_rate)

__all__ = [
    "SimConfig", "CurvePoint", "SimReport",
    "run_miss_detection_sweep", "run_per_sweep",
    "wilson_interval", "sensitivity_from_snr",
    "emit_report", "report_to_csv", "report_to_json",
    "points_from_csv", "report_from_json", "write_report", "load_points",
    "SEED_ENV_VAR",
]

SEED_ENV_VAR = "LRFHSS_SEED"

#: Two-sided 95% normal quantile used by the Wilson interval.
WILSON_Z = 1.959963984540054

#: Receiver noise figure assumed by the sensitivity conversion, in dB.
NOISE_FIGURE_DB = 4.0

#: Fixed Monte Carlo batch sizes (independent of worker count).
MISS_BATCH_TRIALS = 50
PER_BATCH_TRIALS = 1000

#: Stream geometry for miss-detection trials, in channelizer frames.
_LEAD_FRAMES = (100, 150)      # uniform packet-start draw, [low, high)
_TAIL_FRAMES = 40

#: Accept window around the true header: one output-rate sample and
#: three quarters of a hopping channel.
_TIME_TOL_SAMPLES = 1
_FREQ_TOL_HZ = 0.75 * SYMBOL_RATE_BAUD

_SEARCH_INTERVALS = (12, 24, 48)


def wilson_interval(n_fail: int, n_trials: int,
                    z: float = WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for a binomial failure count."""
    if n_trials <= 0:
        return (0.0, 1.0)
    p = n_fail / n_trials
    z2 = z * z
    denom = 1.0 + z2 / n_trials
    centre = (p + z2 / (2.0 * n_trials)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n_trials
                         + z2 / (4.0 * n_trials * n_trials)) / denom
    lo = 0.0 if n_fail == 0 else max(0.0, centre - half)
    hi = 1.0 if n_fail == n_trials else min(1.0, centre + half)
    return (lo, hi)


def sensitivity_from_snr(snr_db: float) -> float:
    """Receiver sensitivity (dBm) for a required SNR in the symbol band.

    Thermal noise floor in 488.28125 Hz plus a fixed noise figure,
    rounded to 0.1 dB.
    """
    noise_dbm = -174.0 + 10.0 * math.log10(SYMBOL_RATE_BAUD)
    return round(noise_dbm + NOISE_FIGURE_DB + snr_db, 1)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """One sweep description, JSON round-trippable.

    The radio profile is a reduced single-OCW setup; the defaults give
    an 80-channel 39.0625 kHz band at 900 MHz with rate-1/3 coding,
    one header replica and 32-byte payloads (18 fragments).
    """

    modulation: str = "gmsk"
    snr_grid_db: tuple[float, ...] = (4.0, 6.0, 8.0, 10.0, 12.0, 14.0)
    doppler_rates_hz_s: tuple[float, ...] = (0.0,)
    timing_offsets_eighths: tuple[int, ...] = (0,)
    search_interval_bits: int = 48
    n_trials: int = 1000
    master_seed: int = 0
    payload_len: int = 32
    coding_rate: str = "1/3"
    n_headers: int = 1
    ocw_hz: float = 39062.5
    grid_hz: float = 3906.25
    carrier_hz: float = 900.0e6

    def __post_init__(self):
        object.__setattr__(self, "snr_grid_db",
                           tuple(float(s) for s in self.snr_grid_db))
        object.__setattr__(self, "doppler_rates_hz_s",
                           tuple(float(d) for d in self.doppler_rates_hz_s))
        object.__setattr__(self, "timing_offsets_eighths",
                           tuple(int(k) for k in self.timing_offsets_eighths))
        rate = normalize_coding_rate(self.coding_rate)
        object.__setattr__(self, "coding_rate",
                           f"{rate.numerator}/{rate.denominator}")
        if self.modulation not in (MODULATION_GMSK, MODULATION_QPSK):
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if any(b <= a for a, b in zip(self.snr_grid_db,
                                      self.snr_grid_db[1:])):
            raise ValueError("snr_grid_db must be strictly increasing")
        if self.search_interval_bits not in _SEARCH_INTERVALS:
            raise ValueError(
                f"search interval must be one of {_SEARCH_INTERVALS} bits")
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if any(not 0 <= k <= 7 for k in self.timing_offsets_eighths):
            raise ValueError("timing offsets are eighths of a symbol, 0..7")
        if not self.snr_grid_db:
            object.__setattr__(self, "snr_grid_db", ())
        # Profile consistency is checked eagerly so a bad config fails
        # at construction, not mid-sweep.
        self.profile()

    def profile(self) -> DataRateProfile:
        return custom_profile(
            ocw_hz=self.ocw_hz, grid_hz=self.grid_hz,
            coding_rate=self.coding_rate, n_headers=self.n_headers,
            max_payload_bytes=max(self.payload_len, 1),
            carrier_hz=self.carrier_hz)

    @property
    def coding_rate_fraction(self) -> Fraction:
        return normalize_coding_rate(self.coding_rate)

    def to_dict(self) -> dict:
        return {
            "modulation": self.modulation,
            "snr_grid_db": list(self.snr_grid_db),
            "doppler_rates_hz_s": list(self.doppler_rates_hz_s),
            "timing_offsets_eighths": list(self.timing_offsets_eighths),
            "search_interval_bits": self.search_interval_bits,
            "n_trials": self.n_trials,
            "master_seed": self.master_seed,
            "payload_len": self.payload_len,
            "coding_rate": self.coding_rate,
            "n_headers": self.n_headers,
            "ocw_hz": self.ocw_hz,
            "grid_hz": self.grid_hz,
            "carrier_hz": self.carrier_hz,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        for key in ("snr_grid_db", "doppler_rates_hz_s",
                    "timing_offsets_eighths"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        return cls.from_dict(json.loads(text))


def effective_seed(cfg: SimConfig) -> int:
    """Master seed after the LRFHSS_SEED environment override."""
    env = os.environ.get(SEED_ENV_VAR)
    return int(env) if env else cfg.master_seed


def _batch_rng(master_seed: int, kind: int, point_index: int,
               batch_index: int) -> np.random.Generator:
    """Independent stream per (sweep kind, grid point, batch)."""
    return np.random.default_rng(
        np.random.SeedSequence((master_seed, kind, point_index, batch_index)))


def _batch_sizes(n_trials: int, batch: int) -> list[int]:
    sizes = [batch] * (n_trials // batch)
    if n_trials % batch:
        sizes.append(n_trials % batch)
    return sizes


# ---------------------------------------------------------------------------
# Report structures
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "metric", "modulation", "search_interval_bits", "snr_db",
    "doppler_rate_hz_s", "timing_offset_eighths",
    "n_trials", "n_fail", "rate", "ci_low", "ci_high",
)


@dataclass(frozen=True)
class CurvePoint:
    """One grid point of a sweep, reduced to a failure rate."""

    metric: str                    # "miss" | "header_per" | "payload_per"
    modulation: str
    search_interval_bits: int
    snr_db: float
    doppler_rate_hz_s: float
    timing_offset_eighths: int
    n_trials: int
    n_fail: int
    rate: float
    ci_low: float
    ci_high: float

    @classmethod
    def from_counts(cls, metric: str, cfg: SimConfig, snr_db: float,
                    doppler: float, timing: int, n_fail: int,
                    n_trials: int) -> "CurvePoint":
        lo, hi = wilson_interval(n_fail, n_trials)
        return cls(metric=metric, modulation=cfg.modulation,
                   search_interval_bits=cfg.search_interval_bits,
                   snr_db=float(snr_db), doppler_rate_hz_s=float(doppler),
                   timing_offset_eighths=int(timing),
                   n_trials=int(n_trials), n_fail=int(n_fail),
                   rate=n_fail / n_trials, ci_low=lo, ci_high=hi)


@dataclass(frozen=True)
class SimReport:
    kind: str                      # "miss" | "per"
    config: SimConfig
    points: tuple[CurvePoint, ...] = field(default_factory=tuple)


def _cell(value) -> str:
    """Deterministic, round-trippable CSV cell text."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_to_csv(report: SimReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for p in report.points:
        writer.writerow([_cell(getattr(p, col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def points_from_csv(text: str) -> tuple[CurvePoint, ...]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError("unrecognized results header row")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        rec = dict(zip(CSV_COLUMNS, row))
        out.append(CurvePoint(
            metric=rec["metric"], modulation=rec["modulation"],
            search_interval_bits=int(rec["search_interval_bits"]),
            snr_db=float(rec["snr_db"]),
            doppler_rate_hz_s=float(rec["doppler_rate_hz_s"]),
            timing_offset_eighths=int(rec["timing_offset_eighths"]),
            n_trials=int(rec["n_trials"]), n_fail=int(rec["n_fail"]),
            rate=float(rec["rate"]), ci_low=float(rec["ci_low"]),
            ci_high=float(rec["ci_high"])))
    return tuple(out)


def report_to_json(report: SimReport) -> str:
    doc = {
        "kind": report.kind,
        "config": report.config.to_dict(),
        "points": [{col: getattr(p, col) for col in CSV_COLUMNS}
                   for p in report.points],
    }
    return json.dumps(doc, indent=2) + "\n"


def report_from_json(text: str) -> SimReport:
    doc = json.loads(text)
    points = tuple(CurvePoint(**{col: rec[col] for col in CSV_COLUMNS})
                   for rec in doc["points"])
    return SimReport(kind=doc["kind"],
                     config=SimConfig.from_dict(doc["config"]),
                     points=points)


def emit_report(report: SimReport, fmt: str = "csv") -> str:
    if fmt == "csv":
        return report_to_csv(report)
    if fmt == "json":
        return report_to_json(report)
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(report: SimReport, path, fmt: str | None = None) -> str:
    """Serialize to `path`; format from `fmt` or the file suffix."""
    path = os.fspath(path)
    if fmt is None:
        fmt = "json" if path.endswith(".json") else "csv"
    text = emit_report(report, fmt)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return fmt


def load_points(path) -> tuple[CurvePoint, ...]:
    """Read curve points back from a CSV or JSON report file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if os.fspath(path).endswith(".json"):
        return report_from_json(text).points
    return points_from_csv(text)


# ---------------------------------------------------------------------------
# Miss-detection sweep
# ---------------------------------------------------------------------------

def _header_block_bits(cfg: SimConfig) -> np.ndarray:
    phdr = packet.phdr_for(cfg.profile(), cfg.payload_len, 7, cfg.modulation)
    return packet.build_header_block(phdr)


def _miss_batch(cfg: SimConfig, wave: np.ndarray, snr_db: float,
                doppler: float, timing: int, n: int,
                rng: np.random.Generator,
                chan_cfg: ChannelizerConfig = DESK_CONFIG) -> int:
    """Run `n` single-header detection trials; return the miss count.

    Each trial plants one header at a random hopping channel and random
    start inside a noise-only capture, channelizes the two candidate
    analysis channels and scans them for syncword events.  A trial is a
    hit when an accepted event lands within one output sample of the
    true block start and within three quarters of a channel of the true
    carrier (Doppler included).
    """
    mk, hop, taps = chan_cfg.mk, chan_cfg.hop, chan_cfg.window_len
    fs = chan_cfg.input_rate_hz
    det_cfg = DetectorConfig(modulation=cfg.modulation,
                             search_interval_bits=cfg.search_interval_bits)
    n_cf = cfg.profile().n_cf

    wave_len = wave.size
    n_samples = ((_LEAD_FRAMES[1] + _TAIL_FRAMES) * hop + wave_len + taps)
    sub_shift = timing * (mk // 8)

    chan_idx = rng.integers(0, n_cf, n)
    delay = rng.integers(_LEAD_FRAMES[0], _LEAD_FRAMES[1], n)

    sigma2 = channel.noise_sigma2(snr_db, mk, 1.0)
    streams = channel.complex_awgn((n, n_samples), sigma2, rng)

    half_rate = math.pi * doppler
    for i in range(n):
        ofs = int(delay[i]) * hop + sub_shift
        m = ofs + np.arange(wave_len)
        phase = 2.0 * math.pi * (int(chan_idx[i]) * m / mk)
        if doppler:
            t = m / fs
            phase = phase + half_rate * t * t
        streams[i, ofs:ofs + wave_len] += wave * np.exp(1j * phase)

    # Channelize just the candidate bins (both are channel centres, so
    # their series need no derotation).
    cand = np.stack([chan_idx // 2, (chan_idx + 1) // 2], axis=1)  # (n, 2)
    cand_bins = 2 * cand
    ubins, inverse = np.unique(cand_bins, return_inverse=True)
    wm = window_matrix(chan_cfg)[:, ubins]
    windows = sliding_window_view(streams, taps, axis=-1)[:, ::hop]
    frames = windows @ wm                                # (n, T, U)
    col = inverse.reshape(n, 2)
    series = np.take_along_axis(
        frames, col[:, None, :], axis=2).transpose(0, 2, 1)  # (n, 2, T)

    scan = scan_series(series, chan_cfg, det_cfg)
    accept = scan["accept"]
    if not accept.any():
        return n

    pre = detector.preamble_series_samples(cfg.modulation)
    bit_samples = mk * block_symbol_count(2, cfg.modulation) // 2
    t_sync = (delay * hop + sub_shift + 18 * bit_samples) / fs
    f_true = chan_idx * SYMBOL_RATE_BAUD + doppler * t_sync
    start_true = delay + sub_shift // hop

    b_idx, c_idx, t_idx = np.nonzero(accept)
    fine = scan["fine_hz"][b_idx, c_idx, t_idx]
    obw, resid = resolve_obw_channel(cand_bins[b_idx, c_idx], fine)
    f_est = obw * SYMBOL_RATE_BAUD + resid
    ok = ((np.abs(f_est - f_true[b_idx]) <= _FREQ_TOL_HZ)
          & (np.abs((t_idx - pre) - start_true[b_idx]) <= _TIME_TOL_SAMPLES))
    hits = np.zeros(n, dtype=bool)
    hits[b_idx[ok]] = True
    return int(n - hits.sum())


def run_miss_detection_sweep(cfg: SimConfig, n_jobs: int = 1) -> SimReport:
    """Header miss-detection rate over (doppler, timing, SNR) grids."""
    seed = effective_seed(cfg)
    wave = modulate_block_batch(_header_block_bits(cfg)[None],
                                cfg.modulation, osf=DESK_CONFIG.mk)[0]
    grid = [(d, k, s) for d in cfg.doppler_rates_hz_s
            for k in cfg.timing_offsets_eighths
            for s in cfg.snr_grid_db]
    sizes = _batch_sizes(cfg.n_trials, MISS_BATCH_TRIALS)

    def task(point_index: int, batch_index: int) -> int:
        d, k, s = grid[point_index]
        rng = _batch_rng(seed, 0, point_index, batch_index)
        return _miss_batch(cfg, wave, s, d, k, sizes[batch_index], rng)

    jobs = [(p, b) for p in range(len(grid)) for b in range(len(sizes))]
    results: dict[tuple[int, int], int] = {}
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            for key, val in zip(jobs, pool.map(lambda j: task(*j), jobs)):
                results[key] = val
    else:
        for key in jobs:
            results[key] = task(*key)

    points = []
    for p, (d, k, s) in enumerate(grid):
        misses = sum(results[(p, b)] for b in range(len(sizes)))
        points.append(CurvePoint.from_counts(
            "miss", cfg, s, d, k, misses, cfg.n_trials))
    return SimReport(kind="miss", config=cfg, points=tuple(points))


# ---------------------------------------------------------------------------
# Packet-error-rate sweep
# ---------------------------------------------------------------------------

def _per_batch(cfg: SimConfig, snr_db: float, n: int,
               rng: np.random.Generator, osf: int = 2) -> tuple[int, int]:
    """Decode `n` random packets at one SNR with ideal synchronization.

    Every block is modulated, hit with calibrated white noise, and
    soft-demodulated at a perfectly known timing and carrier; errors
    are counted against the transmitted truth.  Returns (header
    errors, end-to-end packet errors) — a packet error is a wrong
    header or a wrong payload.
    """
    mod = cfg.modulation
    rate = cfg.coding_rate
    n_bits = 8 * cfg.payload_len
    sigma2 = channel.noise_sigma2(snr_db, osf, 1.0)

    base = packet.phdr_for(cfg.profile(), cfg.payload_len, 0, mod)
    fields_bits = np.tile(np.asarray(base.to_bits(), dtype=np.uint8)[:32],
                          (n, 1))
    fields_bits[:, 12:21] = rng.integers(0, 2, (n, 9), dtype=np.uint8)
    crc = crc8_batch(fields_bits)
    crc_bits = ((crc[:, None] >> np.arange(7, -1, -1)) & 1).astype(np.uint8)
    hdr_info = np.concatenate([fields_bits, crc_bits], axis=1)
    pre = np.tile(packet.PREAMBLE_BITS, (n, 1))
    sync = np.tile(packet.SYNCWORD_BITS, (n, 1))
    blocks = np.concatenate(
        [pre, sync, interleave(conv_encode_batch(hdr_info, "1/2"))], axis=1)

    w = modulate_block_batch(blocks, mod, osf)
    w = w + channel.complex_awgn(w.shape, sigma2, rng)
    soft_h = demodulate_block_batch(w, packet.HEADER_BLOCK_BITS, mod, osf)
    dec_h = viterbi_decode_batch(
        quantize_soft(deinterleave(soft_h[:, 34:])), 40, "1/2")
    hdr_err = (dec_h[:, :32] != fields_bits).any(axis=1)

    payload_bits = rng.integers(0, 2, (n, n_bits), dtype=np.uint8)
    crc16 = crc16_batch(payload_bits)
    crc16_bits = ((crc16[:, None] >> np.arange(15, -1, -1)) & 1
                  ).astype(np.uint8)
    info = np.concatenate([payload_bits, crc16_bits], axis=1)
    coded = interleave(conv_encode_batch(info, rate))
    n_coded = coded.shape[1]
    n_frag = fragment_count(cfg.payload_len, rate)
    slots = n_frag * packet.FRAGMENT_CODED_BITS
    padded = np.zeros((n, slots), dtype=np.uint8)
    padded[:, :n_coded] = coded
    frag_bits = padded.reshape(n, n_frag, packet.FRAGMENT_CODED_BITS)
    frag_pre = np.tile(packet.PREAMBLE_BITS, (n, n_frag, 1))
    frags = np.concatenate([frag_pre, frag_bits], axis=2)
    frags = frags.reshape(n * n_frag, packet.FRAGMENT_BLOCK_BITS)

    wf = modulate_block_batch(frags, mod, osf)
    wf = wf + channel.complex_awgn(wf.shape, sigma2, rng)
    soft_f = demodulate_block_batch(wf, packet.FRAGMENT_BLOCK_BITS, mod, osf)
    soft_f = soft_f.reshape(n, n_frag, packet.FRAGMENT_BLOCK_BITS)
    stream = soft_f[:, :, 2:].reshape(n, slots)[:, :n_coded]
    dec_p = viterbi_decode_batch(quantize_soft(deinterleave(stream)),
                                 n_bits + 16, rate)
    pay_err = (dec_p[:, :n_bits] != payload_bits).any(axis=1)

    return int(hdr_err.sum()), int((hdr_err | pay_err).sum())


def run_per_sweep(cfg: SimConfig, n_jobs: int = 1) -> SimReport:
    """Header and end-to-end packet error rates across the SNR grid.

    This sweep isolates demodulation and decoding: synchronization is
    ideal and the Doppler/timing grids are not applied.
    """
    seed = effective_seed(cfg)
    sizes = _batch_sizes(cfg.n_trials, PER_BATCH_TRIALS)

    def task(point_index: int, batch_index: int) -> tuple[int, int]:
        rng = _batch_rng(seed, 1, point_index, batch_index)
        return _per_batch(cfg, cfg.snr_grid_db[point_index],
                          sizes[batch_index], rng)

    jobs = [(p, b) for p in range(len(cfg.snr_grid_db))
            for b in range(len(sizes))]
    results: dict[tuple[int, int], tuple[int, int]] = {}
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            for key, val in zip(jobs, pool.map(lambda j: task(*j), jobs)):
                results[key] = val
    else:
        for key in jobs:
            results[key] = task(*key)

    points = []
    for p, snr in enumerate(cfg.snr_grid_db):
        hdr = sum(results[(p, b)][0] for b in range(len(sizes)))
        pay = sum(results[(p, b)][1] for b in range(len(sizes)))
        points.append(CurvePoint.from_counts(
            "header_per", cfg, snr, 0.0, 0, hdr, cfg.n_trials))
        points.append(CurvePoint.from_counts(
            "payload_per", cfg, snr, 0.0, 0, pay, cfg.n_trials))
    return SimReport(kind="per", config=cfg, points=tuple(points))


def crossing_snr(points: list | tuple, target: float) -> float | None:
    """Log-linear interpolated SNR where a falling curve hits `target`.

    Points are (snr_db, rate) pairs sorted by SNR; the first bracketing
    segment with a positive floor is used.  None when the curve never
    crosses.
    """
    pts = sorted((float(s), float(r)) for s, r in points)
    for (s0, r0), (s1, r1) in zip(pts, pts[1:]):
        if r0 >= target >= r1 and r1 > 0.0:
            frac = ((math.log10(r0) - math.log10(target))
                    / (math.log10(r0) - math.log10(r1)))
            return s0 + frac * (s1 - s0)
    return None
