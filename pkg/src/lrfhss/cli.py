"""Command-line front end: transmit, impair, detect, decode, simulate.

Subcommands mirror the library layers.  `tx` and `mod` produce packet
descriptions and IQ captures, `chan` applies channel impairments,
`detect` and `rx` run the receive side, `sim-miss`/`sim-per` run
Monte Carlo sweeps, and `report` renders sweep results to a combined
CSV plus PNG figures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import channel, detector, iqfile, modem, packet, profiles, rxchain, sim

__all__ = ["main"]


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _load_profile_file(path) -> profiles.DataRateProfile:
    """Accept either a bare profile JSON or a full sweep-config JSON."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "region" in doc or "data_rate" in doc:
        return profiles.profile_from_dict(doc)
    return sim.SimConfig.from_dict(doc).profile()


def _resolve_profile(args) -> profiles.DataRateProfile:
    region = getattr(args, "region", None) or "custom"
    if region.strip().lower() != "custom":
        if getattr(args, "dr", None) is None:
            raise ValueError("--dr is required with a regional --region")
        return profiles.profile_lookup(region, args.dr)
    profile_path = getattr(args, "profile", None)
    if not profile_path:
        raise ValueError("--region custom requires --profile FILE")
    return _load_profile_file(profile_path)


def _phdr_dict(phdr: packet.Phdr) -> dict:
    rate = phdr.coding_rate
    return {
        "payload_len": phdr.payload_len,
        "coding_rate": f"{rate.numerator}/{rate.denominator}",
        "grid_coarse": int(phdr.grid_coarse),
        "modulation": phdr.modulation,
        "seq_id": phdr.seq_id,
    }


def _track_dict(track) -> dict:
    return {"cfo_hz": float(track.cfo_hz),
            "rate_hz_s": float(track.rate_hz_s),
            "ref_time_s": float(track.ref_time_s)}


def _emit(doc: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(doc, indent=2))
    else:
        for key, value in doc.items():
            print(f"{key}: {value}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


# ---------------------------------------------------------------------------
# toa
# ---------------------------------------------------------------------------

def cmd_toa(args) -> int:
    profile = _resolve_profile(args)
    toa = profiles.profile_time_on_air(profile, args.payload)
    rate = toa.coding_rate
    doc = {
        "region": profile.region,
        "data_rate": profile.data_rate,
        "payload_len": toa.payload_len,
        "coding_rate": f"{rate.numerator}/{rate.denominator}",
        "n_headers": toa.n_headers,
        "n_fragments": toa.n_fragments,
        "coded_bits": toa.coded_bits,
        "header_ms": toa.header_duration_us / 1e3,
        "fragment_ms": toa.fragment_duration_us / 1e3,
        "total_ms": round(toa.total_ms, 1),
    }
    _emit(doc, args.json)
    return 0


# ---------------------------------------------------------------------------
# tx / mod
# ---------------------------------------------------------------------------

def cmd_tx(args) -> int:
    profile = _resolve_profile(args)
    try:
        payload = bytes.fromhex(args.payload_hex)
    except ValueError as exc:
        raise ValueError(f"--payload-hex is not valid hex: {exc}") from None
    pkt = packet.build_packet(payload, profile, args.seq_id, args.mod)
    plan = packet.hopping_plan(profile, args.seq_id, pkt.n_blocks)
    toa = profiles.profile_time_on_air(profile, len(payload))
    doc = {
        "profile": profiles.profile_to_dict(profile),
        "modulation": args.mod,
        "seq_id": args.seq_id,
        "payload_hex": payload.hex(),
        "phdr": _phdr_dict(pkt.phdr),
        "n_blocks": pkt.n_blocks,
        "n_headers": pkt.n_headers,
        "hopping_plan": [int(c) for c in plan],
        "toa_ms": round(toa.total_ms, 1),
    }
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n",
                              encoding="utf-8")
    print(f"wrote {args.out}: {pkt.n_blocks} blocks "
          f"({pkt.n_headers} headers), {doc['toa_ms']} ms on air")
    return 0


def _packet_from_doc(doc: dict) -> tuple[packet.PacketBlocks,
                                         profiles.DataRateProfile]:
    profile = profiles.profile_from_dict(doc["profile"])
    payload = bytes.fromhex(doc["payload_hex"])
    pkt = packet.build_packet(payload, profile, int(doc["seq_id"]),
                              doc["modulation"])
    return pkt, profile


def cmd_mod(args) -> int:
    doc = json.loads(Path(getattr(args, "in")).read_text(encoding="utf-8"))
    pkt, profile = _packet_from_doc(doc)
    meta = {"modulation": pkt.phdr.modulation, "seq_id": pkt.phdr.seq_id,
            "payload_hex": doc["payload_hex"],
            "profile": profiles.profile_to_dict(profile)}
    if args.fullband:
        osf = args.fullband_osf
        if profile.n_cf > osf // 2:
            raise ValueError(
                f"{profile.n_cf} hopping channels do not fit a "
                f"{osf // 2}-channel analysis; raise --fullband-osf")
        hop = osf // 2
        samples = modem.synthesize_fullband(
            pkt, osf, pad_blocks=(args.lead_frames * hop,
                                  args.tail_frames * hop))
        meta["layout"] = "fullband"
    else:
        osf = args.osf
        blocks = modem.synthesize_narrowband(pkt, osf)
        samples = np.concatenate([b.samples for b in blocks])
        meta["layout"] = "narrowband"
    iqfile.write_iq(args.out, samples, osf * profiles.SYMBOL_RATE_BAUD, meta)
    print(f"wrote {args.out}: {samples.size} samples at "
          f"{osf * profiles.SYMBOL_RATE_BAUD:g} Hz ({meta['layout']})")
    return 0


# ---------------------------------------------------------------------------
# chan
# ---------------------------------------------------------------------------

def cmd_chan(args) -> int:
    samples, doc = iqfile.read_iq(getattr(args, "in"))
    fs = iqfile.sample_rate_of(doc)
    osf = fs / profiles.SYMBOL_RATE_BAUD
    if abs(osf - round(osf)) > 1e-9:
        raise ValueError(f"sample rate {fs} Hz is not a whole number of "
                         "samples per symbol")
    osf = round(osf)
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get(sim.SEED_ENV_VAR, "0"))
    cfg = channel.ChannelConfig(
        snr_db=args.snr, doppler_rate=args.doppler_rate,
        initial_cfo_hz=args.cfo, timing_offset_eighths=args.timing,
        rng_seed=seed)
    out = channel.apply_channel(samples, cfg, osf,
                                rng=np.random.default_rng(seed))
    meta = dict(doc.get("meta", {}))
    meta["channel"] = {"snr_db": args.snr, "doppler_rate_hz_s": args.doppler_rate,
                       "initial_cfo_hz": args.cfo,
                       "timing_offset_eighths": args.timing, "seed": seed}
    iqfile.write_iq(args.out, out, fs, meta)
    print(f"wrote {args.out}: snr {args.snr} dB, doppler "
          f"{args.doppler_rate} Hz/s, timing {args.timing}/8, seed {seed}")
    return 0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

def cmd_detect(args) -> int:
    samples, doc = iqfile.read_iq(getattr(args, "in"))
    chan_cfg = detector.ChannelizerConfig(
        n_channels=args.m, bins_per_channel=args.k, window_len=args.win)
    det_cfg = detector.DetectorConfig(
        modulation=args.mod, window_len=args.det_win,
        search_interval_bits=args.search_bits, threshold=args.threshold)
    fs = iqfile.sample_rate_of(doc, fallback=chan_cfg.input_rate_hz)
    frames = detector.channelize_array(samples, chan_cfg, fs)
    store = detector.BlockStore(chan_cfg, capacity=max(1, frames.shape[0]))
    store.store_frames(frames)
    events = detector.detect_headers(store, det_cfg)
    rows = [{"channel_index": e.channel_index,
             "sample_index": e.sample_index,
             "fine_cfo_hz": e.fine_cfo_hz,
             "peak_power": e.peak_power} for e in events]
    if args.json:
        print(json.dumps({"n_frames": int(frames.shape[0]),
                          "series_rate_hz": detector.SERIES_RATE_HZ,
                          "n_events": len(rows), "events": rows}, indent=2))
    else:
        print(f"{len(rows)} event(s) in {frames.shape[0]} frames")
        for r in rows:
            print(f"  channel {r['channel_index']:4d}  sample "
                  f"{r['sample_index']:6d}  fine {r['fine_cfo_hz']:+8.2f} Hz"
                  f"  stat {r['peak_power']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# rx
# ---------------------------------------------------------------------------

def cmd_rx(args) -> int:
    samples, doc = iqfile.read_iq(getattr(args, "in"))
    profile = _resolve_profile(args)
    mod = args.mod
    fs = iqfile.sample_rate_of(doc)
    osf = fs / profiles.SYMBOL_RATE_BAUD
    if abs(osf - round(osf)) > 1e-9:
        raise ValueError(f"sample rate {fs} Hz is not a whole number of "
                         "samples per symbol")
    osf = round(osf)
    oracle = args.oracle_sync == "on"
    if oracle:
        result = rxchain.receive_packet_aligned(samples, profile, mod, osf)
    elif osf <= 16:
        result = rxchain.receive_packet_narrowband(samples, profile, mod, osf)
    else:
        if osf % 2:
            raise ValueError("full-band captures need an even bin count")
        chan_cfg = detector.ChannelizerConfig(
            n_channels=osf // 2, bins_per_channel=2)
        cfg = rxchain.RxConfig(
            profile=profile, modulation=mod, chan_cfg=chan_cfg,
            det_cfg=detector.DetectorConfig(
                modulation=mod, search_interval_bits=args.search_bits))
        result = rxchain.receive_packet(samples, cfg, fs)

    diagnostics = {}
    for key, value in result.diagnostics.items():
        if key == "track":
            diagnostics[key] = _track_dict(value)
        elif isinstance(value, (bool, int, float, str)):
            diagnostics[key] = value
    out = {
        "header_crc_ok": result.header_crc_ok,
        "payload_crc_ok": result.payload_crc_ok,
        "payload_hex": result.payload.hex() if result.payload else None,
        "phdr": _phdr_dict(result.phdr) if result.phdr else None,
        "n_events_used": len(result.events_used),
        "diagnostics": diagnostics,
    }
    _emit(out, args.json)
    return 0 if result.payload is not None else 1


# ---------------------------------------------------------------------------
# sim-miss / sim-per / report
# ---------------------------------------------------------------------------

def _sim_config(args) -> sim.SimConfig:
    if args.config:
        cfg = sim.SimConfig.from_json(
            Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = sim.SimConfig()
    overrides = {}
    if args.mod is not None:
        overrides["modulation"] = args.mod
    if args.snr is not None:
        overrides["snr_grid_db"] = _parse_float_list(args.snr)
    if args.doppler is not None:
        overrides["doppler_rates_hz_s"] = _parse_float_list(args.doppler)
    if args.timing is not None:
        overrides["timing_offsets_eighths"] = _parse_int_list(args.timing)
    if args.search_bits is not None:
        overrides["search_interval_bits"] = args.search_bits
    if args.trials is not None:
        overrides["n_trials"] = args.trials
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.payload_len is not None:
        overrides["payload_len"] = args.payload_len
    if args.coding_rate is not None:
        overrides["coding_rate"] = args.coding_rate
    if overrides:
        cfg = sim.SimConfig.from_dict(cfg.to_dict() | overrides)
    return cfg


def _run_sweep(args, runner, kind: str) -> int:
    cfg = _sim_config(args)
    report = runner(cfg, n_jobs=args.jobs)
    fmt = sim.write_report(report, args.out, args.format)
    print(f"wrote {len(report.points)} {kind} points to {args.out} ({fmt}), "
          f"{cfg.n_trials} trials/point, seed {sim.effective_seed(cfg)}")
    return 0


def cmd_sim_miss(args) -> int:
    return _run_sweep(args, sim.run_miss_detection_sweep, "miss-detection")


def cmd_sim_per(args) -> int:
    return _run_sweep(args, sim.run_per_sweep, "packet-error")


def cmd_report(args) -> int:
    from . import plotting
    points = []
    for path in getattr(args, "in"):
        points.extend(sim.load_points(path))
    out_dir = Path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    merged = sim.SimReport(kind="merged", config=sim.SimConfig(),
                           points=tuple(points))
    csv_path = out_dir / f"{args.stem}.csv"
    csv_path.write_text(sim.report_to_csv(merged), encoding="utf-8")
    figures = plotting.render_figures(points, out_dir, args.stem)
    print(f"wrote {csv_path}")
    for fig in figures:
        print(f"wrote {fig}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_profile_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--region", default="custom",
                   help="EU, US, or custom (default)")
    p.add_argument("--dr", type=int, help="LoRaWAN data rate for a region")
    p.add_argument("--profile",
                   help="JSON profile (or sweep config) for --region custom")


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sweep config JSON")
    p.add_argument("--mod", choices=["gmsk", "qpsk"])
    p.add_argument("--snr", help="comma list of SNR points, dB")
    p.add_argument("--doppler", help="comma list of Doppler rates, Hz/s")
    p.add_argument("--timing", help="comma list of timing offsets, eighths")
    p.add_argument("--search-bits", type=int, choices=[12, 24, 48])
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--payload-len", type=int)
    p.add_argument("--coding-rate", choices=["1/3", "2/3"])
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads (output is identical for any count)")
    p.add_argument("--out", required=True, help="result file (.csv or .json)")
    p.add_argument("--format", choices=["csv", "json"],
                   help="override the suffix-derived format")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrfhss",
        description="LR-FHSS physical-layer toolbox")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toa", help="packet time-on-air")
    _add_profile_flags(p)
    p.add_argument("--payload", type=int, required=True,
                   help="payload length, bytes")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_toa)

    p = sub.add_parser("tx", help="build a packet description")
    _add_profile_flags(p)
    p.add_argument("--payload-hex", required=True)
    p.add_argument("--seq-id", type=int, required=True)
    p.add_argument("--mod", choices=["gmsk", "qpsk"], default="gmsk")
    p.add_argument("--out", required=True, help="packet JSON path")
    p.set_defaults(func=cmd_tx)

    p = sub.add_parser("mod", help="modulate a packet description to IQ")
    p.add_argument("--in", required=True, help="packet JSON from tx")
    p.add_argument("--out", required=True, help="IQ output path")
    p.add_argument("--osf", type=int, default=8,
                   help="narrowband samples per symbol (default 8)")
    p.add_argument("--fullband", action="store_true",
                   help="synthesize the hopped full-band capture")
    p.add_argument("--fullband-osf", type=int, default=256,
                   help="full-band samples per symbol (default 256)")
    p.add_argument("--lead-frames", type=int, default=120,
                   help="leading silence, output frames")
    p.add_argument("--tail-frames", type=int, default=40,
                   help="trailing silence, output frames")
    p.set_defaults(func=cmd_mod)

    p = sub.add_parser("chan", help="apply channel impairments to IQ")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snr", type=float, default=float("inf"),
                   help="SNR in the 488.28125 Hz band, dB")
    p.add_argument("--doppler-rate", type=float, default=0.0,
                   help="carrier drift, Hz/s")
    p.add_argument("--cfo", type=float, default=0.0,
                   help="initial carrier offset, Hz")
    p.add_argument("--timing", type=int, default=0,
                   help="timing offset, eighths of a symbol (needs 8 "
                        "samples/symbol input)")
    p.add_argument("--seed", type=int,
                   help="noise seed (default LRFHSS_SEED or 0)")
    p.set_defaults(func=cmd_chan)

    p = sub.add_parser("detect", help="scan a full-band capture for headers")
    p.add_argument("--in", required=True)
    p.add_argument("--m", type=int, default=128, help="analysis channels")
    p.add_argument("--k", type=int, default=2, help="bins per channel")
    p.add_argument("--win", type=int, default=16, help="analysis window taps")
    p.add_argument("--det-win", type=int, default=None,
                   help="syncword correlator taps (64 gmsk / 32 qpsk)")
    p.add_argument("--search-bits", type=int, default=48,
                   help="peak-persistence span, bits")
    p.add_argument("--mod", choices=["gmsk", "qpsk"], default="gmsk")
    p.add_argument("--threshold", type=float,
                   help="normalized correlation accept level")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("rx", help="decode one packet from IQ")
    p.add_argument("--in", required=True)
    _add_profile_flags(p)
    p.add_argument("--mod", choices=["gmsk", "qpsk"], default="gmsk")
    p.add_argument("--oracle-sync", choices=["on", "off"], default="off",
                   help="on: trust block alignment, skip acquisition")
    p.add_argument("--search-bits", type=int, default=48)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_rx)

    p = sub.add_parser("sim-miss", help="miss-detection Monte Carlo sweep")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_sim_miss)

    p = sub.add_parser("sim-per", help="packet-error Monte Carlo sweep")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_sim_per)

    p = sub.add_parser("report", help="render sweep results to CSV + figures")
    p.add_argument("--in", required=True, action="append",
                   help="result file (repeatable)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stem", default="report")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
