"""LR-FHSS data-rate profiles and time-on-air arithmetic.

Constants shared by the whole transceiver live here: the 488.28125 baud
symbol rate (114 bits / 233.472 ms == 50 bits / 102.4 ms), the regional
data-rate profiles, and the packet time-on-air model

    toa = n_headers * header_duration + n_fragments * fragment_duration

with the fragment count derived from the coded payload length
(payload + 2 CRC bytes + 6 encoder tail bits, divided by the coding
rate, split into 48-bit pieces).  All durations are kept exact on a
microsecond grid; the symbol period is exactly 2048 us.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

# ---------------------------------------------------------------------------
# Link constants
# ---------------------------------------------------------------------------

#: Symbol rate in baud, exactly 15625/32.  Also the occupied bandwidth of a
#: single hopping channel in Hz (printed as "488 Hz" in band plans).
SYMBOL_RATE_BAUD = 488.28125

#: Exact symbol period on the microsecond grid.
SYMBOL_PERIOD_US = 2048

#: Occupied bandwidth of one hopping channel.  Same number as the symbol
#: rate; kept as a separate name because it is used as a frequency.
OBW_HZ = 488.28125

#: Band-plan figure for the OBW, used for channel-count bookkeeping.
OBW_NOMINAL_HZ = 488.0

#: Header block: 2 preamble + 32 syncword + 80 coded PHDR bits.
HEADER_BLOCK_BITS = 114
#: Payload block: 2 preamble + 48 coded payload bits.
FRAGMENT_BLOCK_BITS = 50
#: Coded payload bits carried by one fragment.
FRAGMENT_CODED_BITS = 48

HEADER_DURATION_US = HEADER_BLOCK_BITS * SYMBOL_PERIOD_US      # 233472
FRAGMENT_DURATION_US = FRAGMENT_BLOCK_BITS * SYMBOL_PERIOD_US  # 102400

#: Encoder flush bits appended to the payload before convolutional coding.
ENCODER_TAIL_BITS = 6
#: CRC appended to the payload, in bytes.
PAYLOAD_CRC_BYTES = 2

CODING_RATE_1_3 = Fraction(1, 3)
CODING_RATE_2_3 = Fraction(2, 3)

_RATE_ALIASES = {
    "1/3": CODING_RATE_1_3,
    "2/3": CODING_RATE_2_3,
    Fraction(1, 3): CODING_RATE_1_3,
    Fraction(2, 3): CODING_RATE_2_3,
}


def normalize_coding_rate(rate) -> Fraction:
    """Accept '1/3', '2/3' or the equivalent Fraction; reject the rest."""
    if isinstance(rate, str):
        key = rate.strip()
    elif isinstance(rate, Fraction):
        key = rate
    else:
        raise ValueError(f"unsupported coding rate {rate!r}")
    try:
        return _RATE_ALIASES[key]
    except KeyError:
        raise ValueError(f"unsupported coding rate {rate!r}") from None


# ---------------------------------------------------------------------------
# Data-rate profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataRateProfile:
    """One LR-FHSS operating point.

    The regional profiles mirror the public band plans; `custom_profile`
    builds reduced setups for link-level studies.  `grid_hz` is the
    minimum spacing between the hopping channels of one device, so the
    channels available to a single device form an arithmetic progression
    with step `grid_slots` through the `n_cf` OBW-wide channel indices.
    """

    region: str                 # "EU863-870", "US902-928" or "custom"
    data_rate: int | None       # LoRaWAN DR number, None for custom
    n_carrier_bands: int        # operating channels in the regional plan
    ocw_hz: float               # operating channel width
    grid_hz: float              # hopping grid spacing
    n_cf: int                   # hopping channels inside the OCW
    n_cf_per_ed: int            # hopping channels per end device
    coding_rate: Fraction
    bit_rate_bps: int           # nominal physical bit rate (display figure)
    n_headers: int              # header replica count
    max_payload_bytes: int
    carrier_hz: float = 868.0e6

    @property
    def grid_slots(self) -> int:
        """Channel-index step between adjacent hops of one device."""
        return round(self.grid_hz / OBW_NOMINAL_HZ)

    @property
    def intra_device_channels(self) -> int:
        return self.n_cf_per_ed

    def validate(self) -> None:
        """Cross-check the stored channel counts against the band geometry."""
        if self.n_cf <= 0 or self.n_cf_per_ed <= 0:
            raise ValueError("channel counts must be positive")
        slots = self.grid_slots
        if slots < 1:
            raise ValueError("grid narrower than one channel")
        if self.n_cf != slots * self.n_cf_per_ed:
            raise ValueError(
                f"n_cf={self.n_cf} inconsistent with "
                f"{slots} slots x {self.n_cf_per_ed} channels/device"
            )
        # The published counts are rounded quotients of OCW/OBW and
        # OCW/grid; allow less than one channel of slack.
        if abs(self.n_cf - self.ocw_hz / OBW_NOMINAL_HZ) >= 1.0:
            raise ValueError("n_cf does not match OCW/OBW")
        if abs(self.n_cf_per_ed - self.ocw_hz / self.grid_hz) >= 1.0:
            raise ValueError("n_cf_per_ed does not match OCW/grid")
        if self.coding_rate not in (CODING_RATE_1_3, CODING_RATE_2_3):
            raise ValueError("coding rate must be 1/3 or 2/3")
        if self.n_headers < 1:
            raise ValueError("need at least one header replica")
        if not 1 <= self.max_payload_bytes <= 255:
            raise ValueError("max payload must fit an 8-bit length field")


def _eu(dr, n_carrier, ocw_khz, rate, n_headers, max_len):
    return DataRateProfile(
        region="EU863-870",
        data_rate=dr,
        n_carrier_bands=n_carrier,
        ocw_hz=ocw_khz * 1e3,
        grid_hz=3.9e3,
        n_cf=8 * {137: 35, 336: 86}[ocw_khz],
        n_cf_per_ed={137: 35, 336: 86}[ocw_khz],
        coding_rate=rate,
        bit_rate_bps=162 if rate == CODING_RATE_1_3 else 325,
        n_headers=n_headers,
        max_payload_bytes=max_len,
        carrier_hz=868.0e6,
    )


def _us(dr, rate, n_headers, max_len):
    return DataRateProfile(
        region="US902-928",
        data_rate=dr,
        n_carrier_bands=8,
        ocw_hz=1523e3,
        grid_hz=25.4e3,
        n_cf=52 * 60,
        n_cf_per_ed=60,
        coding_rate=rate,
        bit_rate_bps=162 if rate == CODING_RATE_1_3 else 325,
        n_headers=n_headers,
        max_payload_bytes=max_len,
        carrier_hz=915.0e6,
    )


#: The six public operating points, keyed by (region, data rate).
PROFILES: dict[tuple[str, int], DataRateProfile] = {
    ("EU863-870", 8): _eu(8, 7, 137, CODING_RATE_1_3, 3, 58),
    ("EU863-870", 9): _eu(9, 4, 137, CODING_RATE_2_3, 2, 123),
    ("EU863-870", 10): _eu(10, 7, 336, CODING_RATE_1_3, 3, 58),
    ("EU863-870", 11): _eu(11, 4, 336, CODING_RATE_2_3, 2, 123),
    ("US902-928", 5): _us(5, CODING_RATE_1_3, 3, 58),
    ("US902-928", 6): _us(6, CODING_RATE_2_3, 2, 133),
}

_REGION_ALIASES = {
    "eu": "EU863-870", "eu863-870": "EU863-870", "eu868": "EU863-870",
    "us": "US902-928", "us902-928": "US902-928", "us915": "US902-928",
}


def profile_lookup(region: str, data_rate: int) -> DataRateProfile:
    """Return the operating point for a region/data-rate pair."""
    key = _REGION_ALIASES.get(region.strip().lower())
    if key is None:
        raise ValueError(f"unknown region {region!r}")
    try:
        return PROFILES[(key, data_rate)]
    except KeyError:
        valid = sorted(dr for reg, dr in PROFILES if reg == key)
        raise ValueError(
            f"{key} has no LR-FHSS DR{data_rate}; valid: {valid}"
        ) from None


def custom_profile(
    *,
    ocw_hz: float,
    grid_hz: float,
    coding_rate,
    n_headers: int,
    max_payload_bytes: int = 255,
    carrier_hz: float = 900.0e6,
) -> DataRateProfile:
    """Build a reduced single-OCW profile for link-level simulation.

    Channel counts are derived from the band geometry: the grid step in
    channel indices is round(grid/OBW) and every grid position holds one
    usable channel per device.
    """
    slots = round(grid_hz / OBW_NOMINAL_HZ)
    per_ed = int(ocw_hz / grid_hz + 0.5)
    prof = DataRateProfile(
        region="custom",
        data_rate=None,
        n_carrier_bands=1,
        ocw_hz=float(ocw_hz),
        grid_hz=float(grid_hz),
        n_cf=slots * per_ed,
        n_cf_per_ed=per_ed,
        coding_rate=normalize_coding_rate(coding_rate),
        bit_rate_bps=162 if normalize_coding_rate(coding_rate) == CODING_RATE_1_3 else 325,
        n_headers=int(n_headers),
        max_payload_bytes=int(max_payload_bytes),
        carrier_hz=float(carrier_hz),
    )
    prof.validate()
    return prof


# ---------------------------------------------------------------------------
# Time-on-air
# ---------------------------------------------------------------------------

def coded_payload_bits(payload_len: int, coding_rate) -> int:
    """Coded bit count for a payload of `payload_len` bytes.

    payload + 2 CRC bytes + 6 tail bits, divided by the coding rate.
    The result is always an integer for byte-aligned payloads.
    """
    if not 1 <= payload_len <= 255:
        raise ValueError(f"payload length {payload_len} outside 1..255 bytes")
    rate = normalize_coding_rate(coding_rate)
    raw = 8 * (payload_len + PAYLOAD_CRC_BYTES) + ENCODER_TAIL_BITS
    coded = Fraction(raw) / rate
    assert coded.denominator == 1
    return int(coded)


def fragment_count(payload_len: int, coding_rate) -> int:
    """Number of 48-bit payload fragments for a payload of given length."""
    return math.ceil(coded_payload_bits(payload_len, coding_rate) / FRAGMENT_CODED_BITS)


def fragment_count_approx(payload_len: int, coding_rate) -> int:
    """Shortcut form ceil((payload_len + 3) / info_bytes_per_fragment).

    A fragment carries 48 coded bits, i.e. 2 information bytes at rate
    1/3 or 4 at rate 2/3; the +3 absorbs the CRC and tail overhead.
    Agrees with `fragment_count` for every byte-aligned payload.
    """
    if not 1 <= payload_len <= 255:
        raise ValueError(f"payload length {payload_len} outside 1..255 bytes")
    rate = normalize_coding_rate(coding_rate)
    info_bytes = 2 if rate == CODING_RATE_1_3 else 4
    return math.ceil((payload_len + 3) / info_bytes)


@dataclass(frozen=True)
class ToaBreakdown:
    """Packet time-on-air split into its block contributions."""

    payload_len: int
    coding_rate: Fraction
    n_headers: int
    n_fragments: int
    coded_bits: int
    header_duration_us: int = HEADER_DURATION_US
    fragment_duration_us: int = FRAGMENT_DURATION_US

    @property
    def total_us(self) -> int:
        return (self.n_headers * self.header_duration_us
                + self.n_fragments * self.fragment_duration_us)

    @property
    def total_ms(self) -> float:
        return self.total_us / 1e3

    @property
    def total_s(self) -> float:
        return self.total_us / 1e6


def time_on_air(payload_len: int, coding_rate, n_headers: int) -> ToaBreakdown:
    """Packet time-on-air for a payload of `payload_len` bytes.

    Exact on the microsecond grid: 233472 us per header block plus
    102400 us per payload fragment.
    """
    if n_headers < 1:
        raise ValueError("need at least one header replica")
    rate = normalize_coding_rate(coding_rate)
    return ToaBreakdown(
        payload_len=payload_len,
        coding_rate=rate,
        n_headers=int(n_headers),
        n_fragments=fragment_count(payload_len, rate),
        coded_bits=coded_payload_bits(payload_len, rate),
    )


def profile_time_on_air(profile: DataRateProfile, payload_len: int | None = None) -> ToaBreakdown:
    """Time-on-air under a profile; defaults to the maximum payload."""
    if payload_len is None:
        payload_len = profile.max_payload_bytes
    if payload_len > profile.max_payload_bytes:
        raise ValueError(
            f"payload {payload_len} B exceeds profile cap "
            f"{profile.max_payload_bytes} B"
        )
    return time_on_air(payload_len, profile.coding_rate, profile.n_headers)


# ---------------------------------------------------------------------------
# Profile serialization (for CLI config files)
# ---------------------------------------------------------------------------

def profile_to_dict(profile: DataRateProfile) -> dict:
    """JSON-ready description; regional points serialize by reference."""
    if profile.region != "custom":
        return {"region": profile.region, "data_rate": profile.data_rate}
    rate = profile.coding_rate
    return {
        "region": "custom",
        "ocw_hz": profile.ocw_hz,
        "grid_hz": profile.grid_hz,
        "coding_rate": f"{rate.numerator}/{rate.denominator}",
        "n_headers": profile.n_headers,
        "max_payload_bytes": profile.max_payload_bytes,
        "carrier_hz": profile.carrier_hz,
    }


def profile_from_dict(doc: dict) -> DataRateProfile:
    """Inverse of `profile_to_dict`."""
    region = doc.get("region", "custom")
    if region != "custom":
        return profile_lookup(region, int(doc["data_rate"]))
    kwargs = {k: doc[k] for k in
              ("ocw_hz", "grid_hz", "coding_rate", "n_headers")}
    for opt in ("max_payload_bytes", "carrier_hz"):
        if opt in doc:
            kwargs[opt] = doc[opt]
    return custom_profile(**kwargs)
