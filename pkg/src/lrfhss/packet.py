"""Packet construction: header blocks, payload fragments, hopping plan.

A packet is `n_headers` identical 114-bit header blocks followed by
48+2-bit payload fragments, each block transmitted on its own hopping
channel:

    header block  = 2 preamble + 32 syncword + 80 coded header bits
    payload block = 2 preamble + 48 coded payload bits

The 40-bit header field (32-bit PHDR + 8-bit CRC) is encoded by the
tail-biting rate-1/2 code and interleaved; the payload plus CRC-16 is
encoded at rate 1/3 or 2/3, interleaved as one stream, zero-padded to
a whole number of 48-bit pieces and fragmented.

PHDR field layout (32 bits, frozen by this implementation):

    [0:8]    payload length in bytes
    [8:10]   coding rate (0 = 1/3, 1 = 2/3)
    [10]     hopping grid (0 = 3.9 kHz, 1 = 25.4 kHz)
    [11]     modulation (0 = GMSK, 1 = QPSK)
    [12:21]  hopping sequence id (9 bits)
    [21:32]  reserved, zero

The hopping plan is a keyed deterministic function of the sequence id,
the profile geometry and the block count, so the receiver can rebuild
it from the decoded PHDR alone.  Channels of one device form an
arithmetic progression (step = grid/OBW) offset by the sequence id;
consecutive blocks never reuse a channel.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import coding
from .profiles import (
    CODING_RATE_1_3,
    CODING_RATE_2_3,
    DataRateProfile,
    FRAGMENT_BLOCK_BITS,
    FRAGMENT_CODED_BITS,
    HEADER_BLOCK_BITS,
    coded_payload_bits,
    fragment_count,
    normalize_coding_rate,
)

SYNCWORD = 0x2C0F7995
SYNCWORD_BITS = coding.int_to_bits(SYNCWORD, 32)
#: Fixed per-block preamble pattern.
PREAMBLE_BITS = np.array([0, 1], dtype=np.uint8)

PHDR_BITS = 32
PHDR_CRC_BITS = 8
HEADER_FIELD_BITS = PHDR_BITS + PHDR_CRC_BITS          # 40
HEADER_CODED_BITS = 2 * HEADER_FIELD_BITS              # 80

SEQ_ID_BITS = 9
MAX_SEQ_ID = (1 << SEQ_ID_BITS) - 1

#: Documented cap on plan length; the longest standard packet needs 36.
MAX_PLAN_BLOCKS = 256

MODULATION_GMSK = "gmsk"
MODULATION_QPSK = "qpsk"
_MOD_CODES = {MODULATION_GMSK: 0, MODULATION_QPSK: 1}
_RATE_CODES = {CODING_RATE_1_3: 0, CODING_RATE_2_3: 1}


class PlanTooLong(ValueError):
    """Requested hopping plan exceeds the supported block count."""


# ---------------------------------------------------------------------------
# PHDR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phdr:
    payload_len: int
    coding_rate: Fraction
    grid_coarse: bool          # False = 3.9 kHz grid, True = 25.4 kHz
    modulation: str
    seq_id: int

    def __post_init__(self):
        if not 1 <= self.payload_len <= 255:
            raise ValueError("payload length outside 1..255")
        if self.modulation not in _MOD_CODES:
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if not 0 <= self.seq_id <= MAX_SEQ_ID:
            raise ValueError(f"sequence id outside 0..{MAX_SEQ_ID}")
        if self.coding_rate not in _RATE_CODES:
            raise ValueError("coding rate must be 1/3 or 2/3")

    def to_bits(self) -> np.ndarray:
        bits = np.zeros(PHDR_BITS, dtype=np.uint8)
        bits[0:8] = coding.int_to_bits(self.payload_len, 8)
        bits[8:10] = coding.int_to_bits(_RATE_CODES[self.coding_rate], 2)
        bits[10] = int(self.grid_coarse)
        bits[11] = _MOD_CODES[self.modulation]
        bits[12:21] = coding.int_to_bits(self.seq_id, SEQ_ID_BITS)
        return bits

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "Phdr":
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != (PHDR_BITS,):
            raise ValueError("PHDR must be exactly 32 bits")
        rate_code = coding.bits_to_int(bits[8:10])
        if rate_code > 1:
            raise ValueError(f"reserved coding-rate code {rate_code}")
        mod = MODULATION_QPSK if bits[11] else MODULATION_GMSK
        return cls(
            payload_len=coding.bits_to_int(bits[0:8]),
            coding_rate=CODING_RATE_1_3 if rate_code == 0 else CODING_RATE_2_3,
            grid_coarse=bool(bits[10]),
            modulation=mod,
            seq_id=coding.bits_to_int(bits[12:21]),
        )


def phdr_for(profile: DataRateProfile, payload_len: int, seq_id: int,
             modulation: str) -> Phdr:
    return Phdr(
        payload_len=payload_len,
        coding_rate=profile.coding_rate,
        grid_coarse=profile.grid_hz > 10e3,
        modulation=modulation,
        seq_id=seq_id,
    )


# ---------------------------------------------------------------------------
# Header block
# ---------------------------------------------------------------------------

def build_header_block(phdr: Phdr) -> np.ndarray:
    """114-bit header block: preamble + syncword + coded header field."""
    field = np.concatenate([
        phdr.to_bits(),
        coding.int_to_bits(coding.crc8(phdr.to_bits()), PHDR_CRC_BITS),
    ])
    coded = coding.conv_encode(field, "1/2")
    assert coded.size == HEADER_CODED_BITS
    block = np.concatenate([PREAMBLE_BITS, SYNCWORD_BITS,
                            coding.interleave(coded)])
    assert block.size == HEADER_BLOCK_BITS
    return block


def header_coded_view(block_bits: np.ndarray) -> np.ndarray:
    """The 80 coded-bit positions of a header block (post-syncword)."""
    return block_bits[..., 2 + 32:]


# ---------------------------------------------------------------------------
# Payload fragments
# ---------------------------------------------------------------------------

def encode_payload(payload: bytes, coding_rate) -> np.ndarray:
    """payload -> CRC16 append -> convolutional encode -> interleave."""
    rate = normalize_coding_rate(coding_rate)
    if not 1 <= len(payload) <= 255:
        raise ValueError("payload length outside 1..255 bytes")
    bits = coding.bytes_to_bits(payload)
    bits = np.concatenate([bits, coding.int_to_bits(coding.crc16(bits), 16)])
    coded = coding.conv_encode(bits, rate)
    assert coded.size == coded_payload_bits(len(payload), rate)
    return coding.interleave(coded)


def fragment_stream(stream: np.ndarray) -> np.ndarray:
    """Split an interleaved coded stream into (n, 50)-bit blocks.

    Zero-pads the tail to a whole number of 48-bit pieces, then
    prepends the 2-bit preamble to each piece.
    """
    n_frag = -(-stream.size // FRAGMENT_CODED_BITS)
    padded = np.zeros(n_frag * FRAGMENT_CODED_BITS, dtype=np.uint8)
    padded[:stream.size] = stream
    bodies = padded.reshape(n_frag, FRAGMENT_CODED_BITS)
    pre = np.tile(PREAMBLE_BITS, (n_frag, 1))
    return np.concatenate([pre, bodies], axis=1)


def assemble_stream(fragments: np.ndarray, coded_bits: int) -> np.ndarray:
    """Inverse of `fragment_stream`: strip preambles and padding."""
    fragments = np.asarray(fragments)
    if fragments.ndim != 2 or fragments.shape[1] != FRAGMENT_BLOCK_BITS:
        raise ValueError("fragments must be (n, 50)")
    bodies = fragments[:, len(PREAMBLE_BITS):]
    return bodies.reshape(-1)[:coded_bits]


# ---------------------------------------------------------------------------
# Hopping plan
# ---------------------------------------------------------------------------

def _mix64(*values: int) -> int:
    """splitmix64-style hash of an integer tuple (stable across runs)."""
    mask = (1 << 64) - 1
    acc = 0x9E3779B97F4A7C15
    for v in values:
        acc = (acc ^ (v & mask)) * 0xBF58476D1CE4E5B9 & mask
        acc ^= acc >> 27
        acc = acc * 0x94D049BB133111EB & mask
        acc ^= acc >> 31
    return acc


def device_channel_set(profile: DataRateProfile, seq_id: int) -> np.ndarray:
    """The hopping channels available to one device.

    An arithmetic progression of `n_cf_per_ed` OBW-channel indices with
    step grid/OBW; the sequence id picks the progression offset.
    """
    step = profile.grid_slots
    offset = seq_id % step
    chans = offset + step * np.arange(profile.n_cf_per_ed)
    assert chans[-1] < profile.n_cf
    return chans


def hopping_plan(profile: DataRateProfile, seq_id: int, n_blocks: int) -> np.ndarray:
    """Channel index for each of the packet's hopping blocks.

    Deterministic in (profile geometry, seq_id, n_blocks); consecutive
    entries always differ.  Raises PlanTooLong beyond MAX_PLAN_BLOCKS.
    """
    if not 0 <= seq_id <= MAX_SEQ_ID:
        raise ValueError(f"sequence id outside 0..{MAX_SEQ_ID}")
    if n_blocks < 1:
        raise ValueError("plan needs at least one block")
    if n_blocks > MAX_PLAN_BLOCKS:
        raise PlanTooLong(f"{n_blocks} blocks > cap {MAX_PLAN_BLOCKS}")
    chans = device_channel_set(profile, seq_id)
    if chans.size < 2:
        raise ValueError("hopping needs at least two channels per device")
    rng = random.Random(_mix64(seq_id, profile.grid_slots,
                               profile.n_cf_per_ed, n_blocks))
    picks = np.empty(n_blocks, dtype=np.int64)
    prev = rng.randrange(chans.size)
    picks[0] = prev
    for i in range(1, n_blocks):
        r = rng.randrange(chans.size - 1)
        prev = r if r < prev else r + 1
        picks[i] = prev
    return chans[picks]


# ---------------------------------------------------------------------------
# Whole packet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PacketBlocks:
    """Transmit-side packet: bits per hopping block plus the plan."""

    profile: DataRateProfile
    phdr: Phdr
    header_bits: np.ndarray        # (114,)
    fragment_bits: np.ndarray      # (n_fragments, 50)
    plan: np.ndarray               # (n_headers + n_fragments,)

    @property
    def n_headers(self) -> int:
        return self.profile.n_headers

    @property
    def n_fragments(self) -> int:
        return self.fragment_bits.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.n_headers + self.n_fragments

    def block_bits(self, index: int) -> np.ndarray:
        """Bits of hopping block `index` (headers first)."""
        if index < self.n_headers:
            return self.header_bits
        return self.fragment_bits[index - self.n_headers]

    def block_bit_len(self, index: int) -> int:
        return HEADER_BLOCK_BITS if index < self.n_headers else FRAGMENT_BLOCK_BITS


def build_packet(payload: bytes, profile: DataRateProfile, seq_id: int,
                 modulation: str = MODULATION_GMSK) -> PacketBlocks:
    """Build all hopping blocks for one payload."""
    if len(payload) > profile.max_payload_bytes:
        raise ValueError(
            f"payload {len(payload)} B exceeds profile cap "
            f"{profile.max_payload_bytes} B")
    phdr = phdr_for(profile, len(payload), seq_id, modulation)
    header = build_header_block(phdr)
    frags = fragment_stream(encode_payload(payload, profile.coding_rate))
    n_expected = fragment_count(len(payload), profile.coding_rate)
    assert frags.shape[0] == n_expected
    plan = hopping_plan(profile, seq_id, profile.n_headers + n_expected)
    return PacketBlocks(profile=profile, phdr=phdr, header_bits=header,
                        fragment_bits=frags, plan=plan)
