"""Bit-level processing: CRCs, convolutional code, interleaver.

Polynomial choices (frozen for interoperability of this implementation):

* CRC-8  over the 32-bit header field: x^8 + x^2 + x + 1 (0x07),
  zero init, no reflection, no output xor.
* CRC-16 over the payload: x^16 + x^12 + x^5 + 1 (0x1021), zero init,
  no reflection, no output xor.  Both CRCs therefore satisfy the long
  division identity: appending the CRC to the message leaves remainder 0.
* Convolutional code: constraint length 7.  The rate 1/3 mother code
  uses generators (0o133, 0o171, 0o165); the rate 1/2 header code uses
  (0o133, 0o171).  Rate 2/3 is the mother code punctured with the
  period-6 keep mask [1, 1, 0, 1, 0, 0].
* The header code is tail-biting (no tail bits, 40 in -> 80 out); the
  payload code is zero-tail (6 flush bits are appended internally).

The Viterbi decoder is soft-decision.  Soft inputs follow one sign
convention everywhere in this package: positive values favor bit 1.
Decoders are exact maximum-likelihood: the tail-biting case scores all
64 start states instead of using an approximate wrap-around pass.
All hot-path entry points are batched over a leading packet axis.
"""
from __future__ import annotations

import numpy as np

# ---------------------------------------------------------------------------
# Bit/byte utilities (MSB first everywhere)
# ---------------------------------------------------------------------------


def bytes_to_bits(data: bytes | bytearray | np.ndarray) -> np.ndarray:
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    return np.unpackbits(arr)


def bits_to_bytes(bits: np.ndarray) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 8:
        raise ValueError(f"bit count {bits.size} is not a whole byte count")
    return np.packbits(bits).tobytes()


def int_to_bits(value: int, width: int) -> np.ndarray:
    if value < 0 or value >= (1 << width):
        raise ValueError(f"{value} does not fit in {width} bits")
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)],
                    dtype=np.uint8)


def bits_to_int(bits: np.ndarray) -> int:
    out = 0
    for b in np.asarray(bits, dtype=np.uint8):
        out = (out << 1) | int(b)
    return out


# ---------------------------------------------------------------------------
# CRC
# ---------------------------------------------------------------------------

CRC8_POLY = 0x07
CRC16_POLY = 0x1021


def _crc_bits(bits: np.ndarray, width: int, poly: int) -> int:
    """Bitwise CRC register, zero init, not reflected, no final xor."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    reg = np.zeros(bits.shape[0], dtype=np.uint32)
    top = width - 1
    mask = (1 << width) - 1
    for i in range(bits.shape[1]):
        fb = ((reg >> top) ^ bits[:, i]) & 1
        reg = ((reg << 1) & mask) ^ (fb * poly)
    return reg


def crc8(bits: np.ndarray) -> int:
    """CRC-8 of a bit sequence (the 32-bit header field in practice)."""
    return int(_crc_bits(bits, 8, CRC8_POLY)[0])


def crc16(bits: np.ndarray) -> int:
    """CRC-16 of a bit sequence (the payload bytes in practice)."""
    return int(_crc_bits(bits, 16, CRC16_POLY)[0])


def crc8_batch(bits: np.ndarray) -> np.ndarray:
    return _crc_bits(bits, 8, CRC8_POLY)


def crc16_batch(bits: np.ndarray) -> np.ndarray:
    return _crc_bits(bits, 16, CRC16_POLY)


# ---------------------------------------------------------------------------
# Convolutional code
# ---------------------------------------------------------------------------

CONSTRAINT_LEN = 7
N_STATES = 1 << (CONSTRAINT_LEN - 1)          # 64
GEN_RATE_12 = (0o133, 0o171)
GEN_RATE_13 = (0o133, 0o171, 0o165)
#: Keep mask applied to the rate 1/3 output stream to reach rate 2/3.
PUNCTURE_2_3 = np.array([1, 1, 0, 1, 0, 0], dtype=bool)

_RATE_KEYS = {"1/2": "1/2", "1/3": "1/3", "2/3": "2/3"}


def _rate_key(rate) -> str:
    from fractions import Fraction
    if isinstance(rate, Fraction):
        rate = f"{rate.numerator}/{rate.denominator}"
    key = _RATE_KEYS.get(str(rate).strip())
    if key is None:
        raise ValueError(f"unsupported code rate {rate!r}")
    return key


def _parity(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint32)
    for shift in (16, 8, 4, 2, 1):
        x ^= x >> shift
    return (x & 1).astype(np.uint8)


def _encode_steps(bits: np.ndarray, gens, init_state: np.ndarray) -> np.ndarray:
    """Run the shift register over a (B, n) bit matrix; (B, n, n_gen) out."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    n_pkt, n = bits.shape
    out = np.empty((n_pkt, n, len(gens)), dtype=np.uint8)
    state = init_state.astype(np.uint32).copy()
    full_mask = (1 << CONSTRAINT_LEN) - 1
    for i in range(n):
        state = ((state << 1) | bits[:, i]) & full_mask
        for k, g in enumerate(gens):
            out[:, i, k] = _parity(state & g)
    return out


def _tb_init_state(bits: np.ndarray) -> np.ndarray:
    """Preload the register with the last 6 info bits (tail-biting)."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    state = np.zeros(bits.shape[0], dtype=np.uint32)
    for i in range(bits.shape[1] - (CONSTRAINT_LEN - 1), bits.shape[1]):
        state = ((state << 1) | bits[:, i]) & (N_STATES - 1)
    return state


def conv_encode_batch(bits: np.ndarray, rate) -> np.ndarray:
    """Encode a (B, n) bit matrix; returns (B, n_coded).

    Rate 1/2 is the tail-biting header code (n_coded == 2n); rates 1/3
    and 2/3 are zero-tail (6 flush bits appended internally), with
    n_coded == 3(n+6) and ceil(3(n+6)/2) respectively.
    """
    key = _rate_key(rate)
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    n_pkt, n = bits.shape
    if key == "1/2":
        if n < CONSTRAINT_LEN - 1:
            raise ValueError("tail-biting needs at least 6 info bits")
        steps = _encode_steps(bits, GEN_RATE_12, _tb_init_state(bits))
        return steps.reshape(n_pkt, 2 * n)
    flushed = np.concatenate(
        [bits, np.zeros((n_pkt, CONSTRAINT_LEN - 1), dtype=np.uint8)], axis=1)
    steps = _encode_steps(flushed, GEN_RATE_13, np.zeros(n_pkt, dtype=np.uint32))
    mother = steps.reshape(n_pkt, -1)
    if key == "1/3":
        return mother
    keep = np.resize(PUNCTURE_2_3, mother.shape[1])
    return mother[:, keep]


def conv_encode(bits: np.ndarray, rate) -> np.ndarray:
    """Encode one bit vector; see `conv_encode_batch`."""
    return conv_encode_batch(np.atleast_2d(bits), rate)[0]


def coded_len(n_info: int, rate) -> int:
    key = _rate_key(rate)
    if key == "1/2":
        return 2 * n_info
    mother = 3 * (n_info + CONSTRAINT_LEN - 1)
    if key == "1/3":
        return mother
    return int(np.count_nonzero(np.resize(PUNCTURE_2_3, mother)))


def depuncture(soft: np.ndarray, n_info: int) -> np.ndarray:
    """Insert zeros (erasures) at the punctured rate-2/3 positions."""
    soft = np.atleast_2d(np.asarray(soft, dtype=np.float32))
    mother_len = 3 * (n_info + CONSTRAINT_LEN - 1)
    keep = np.resize(PUNCTURE_2_3, mother_len)
    if soft.shape[1] != np.count_nonzero(keep):
        raise ValueError(
            f"expected {np.count_nonzero(keep)} punctured values, "
            f"got {soft.shape[1]}")
    full = np.zeros((soft.shape[0], mother_len), dtype=np.float32)
    full[:, keep] = soft
    return full


# --- trellis tables, built once per generator set ---------------------------

def _trellis(gens):
    states = np.arange(N_STATES, dtype=np.uint32)
    # Arriving in state s, the register window was s (from predecessor
    # s >> 1) or s | 64 (from predecessor (s >> 1) + 32); the new info
    # bit is the LSB of s.
    out0 = np.stack([_parity(states & g) for g in gens], axis=1)
    out1 = np.stack([_parity((states | N_STATES) & g) for g in gens], axis=1)
    # Antipodal: +1 where the coded bit is 1 (matches the soft-value sign).
    return (out0.astype(np.float32) * 2 - 1), (out1.astype(np.float32) * 2 - 1)


_TRELLIS = {GEN_RATE_12: _trellis(GEN_RATE_12), GEN_RATE_13: _trellis(GEN_RATE_13)}


def _viterbi_forward(soft_steps: np.ndarray, gens, metric0: np.ndarray):
    """Shared add-compare-select loop.

    soft_steps: (n_steps, n_gen, ...) soft values, trailing axes carried
    through; metric0: (N_STATES, ...) initial path metrics.  Returns the
    final metrics and the (n_steps, N_STATES, ...) decision bits.
    """
    n_steps = soft_steps.shape[0]
    par0, par1 = _TRELLIS[gens]
    tail_shape = metric0.shape[1:]
    decisions = np.empty((n_steps, N_STATES) + tail_shape, dtype=bool)
    metric = metric0.astype(np.float32)
    pred0 = np.arange(N_STATES) >> 1
    pred1 = pred0 + (N_STATES >> 1)
    for t in range(n_steps):
        bm0 = np.tensordot(par0, soft_steps[t], axes=(1, 0))  # (N_STATES, ...)
        bm1 = np.tensordot(par1, soft_steps[t], axes=(1, 0))
        cand0 = metric[pred0] + bm0
        cand1 = metric[pred1] + bm1
        take1 = cand1 > cand0
        decisions[t] = take1
        metric = np.where(take1, cand1, cand0)
    return metric, decisions


def _traceback(decisions: np.ndarray, end_state: np.ndarray) -> np.ndarray:
    """Walk decisions backward; returns (n_steps, B) info bits."""
    n_steps = decisions.shape[0]
    n_pkt = end_state.shape[-1]
    cols = np.arange(n_pkt)
    bits = np.empty((n_steps, n_pkt), dtype=np.uint8)
    state = end_state.astype(np.int64).copy()
    for t in range(n_steps - 1, -1, -1):
        bits[t] = state & 1
        take1 = decisions[t][state, cols]
        state = (state >> 1) + np.where(take1, N_STATES >> 1, 0)
    return bits


def viterbi_decode_batch(soft: np.ndarray, n_info: int, rate) -> np.ndarray:
    """Soft-decision ML decode of a (B, n_coded) soft-value matrix.

    Rate 1/2 decodes the tail-biting header code exactly by scoring all
    64 start states; rates 1/3 and 2/3 decode the zero-tail code (the 6
    flush bits are stripped from the result).  Returns (B, n_info) bits.
    """
    key = _rate_key(rate)
    soft = np.atleast_2d(np.asarray(soft, dtype=np.float32))
    n_pkt = soft.shape[0]
    if key == "1/2":
        if soft.shape[1] != 2 * n_info:
            raise ValueError("soft length does not match 2x info length")
        steps = soft.reshape(n_pkt, n_info, 2).transpose(1, 2, 0)
        # Start-state axis a: path metric (N_STATES, a, B); paths must
        # end where they started.
        metric0 = np.full((N_STATES, N_STATES, 1), -np.inf, dtype=np.float32)
        metric0[np.arange(N_STATES), np.arange(N_STATES), 0] = 0.0
        metric0 = np.broadcast_to(metric0, (N_STATES, N_STATES, n_pkt)).copy()
        final, decisions = _viterbi_forward(
            steps[:, :, None, :], GEN_RATE_12, metric0)
        closed = final[np.arange(N_STATES), np.arange(N_STATES), :]  # (a, B)
        best_start = np.argmax(closed, axis=0)                       # (B,)
        cols = np.arange(n_pkt)
        dec = decisions[:, :, best_start, cols]                      # (t, s, B)
        return _traceback(dec, best_start).T
    n_steps = n_info + CONSTRAINT_LEN - 1
    if key == "2/3":
        full = depuncture(soft, n_info)
    else:
        if soft.shape[1] != 3 * n_steps:
            raise ValueError("soft length does not match rate-1/3 output")
        full = soft
    steps = full.reshape(n_pkt, n_steps, 3).transpose(1, 2, 0)
    metric0 = np.full((N_STATES, n_pkt), -np.inf, dtype=np.float32)
    metric0[0] = 0.0
    _, decisions = _viterbi_forward(steps, GEN_RATE_13, metric0)
    end = np.zeros(n_pkt, dtype=np.int64)   # zero-tail: end in state 0
    bits = _traceback(decisions, end).T
    return bits[:, :n_info]


def viterbi_decode(soft: np.ndarray, n_info: int, rate) -> np.ndarray:
    """Decode one soft-value vector; see `viterbi_decode_batch`."""
    return viterbi_decode_batch(np.atleast_2d(soft), n_info, rate)[0]


def quantize_soft(soft: np.ndarray, n_bits: int = 4) -> np.ndarray:
    """Quantize soft values to symmetric integers (4 bits -> -7..+7).

    The scale puts twice the mean magnitude at full range, leaving
    headroom for the noise tails; rows are normalized independently.
    """
    soft = np.atleast_2d(np.asarray(soft, dtype=np.float32))
    top = (1 << (n_bits - 1)) - 1
    scale = 2.0 * np.mean(np.abs(soft), axis=1, keepdims=True) / top
    scale[scale == 0] = 1.0
    q = np.clip(np.rint(soft / scale), -top, top)
    return q.astype(np.float32)


# ---------------------------------------------------------------------------
# Interleaver
# ---------------------------------------------------------------------------

INTERLEAVE_ROWS = 8


def _interleave_perm(n: int, n_rows: int = INTERLEAVE_ROWS) -> np.ndarray:
    """Row-write/column-read permutation, ragged tail allowed.

    perm[i] = input index that lands at output position i.  Adjacent
    input bits end up one row apart in the read order, i.e. at least
    `n_rows` output positions apart for rectangular fills.
    """
    n_cols = -(-n // n_rows)
    k = np.arange(n)
    row, col = k // n_cols, k % n_cols
    order = np.lexsort((row, col))      # by column, then row
    return k[order]


def interleave(bits: np.ndarray, n_rows: int = INTERLEAVE_ROWS) -> np.ndarray:
    """Block-interleave along the last axis (any length, bijective)."""
    bits = np.asarray(bits)
    return bits[..., _interleave_perm(bits.shape[-1], n_rows)]


def deinterleave(bits: np.ndarray, n_rows: int = INTERLEAVE_ROWS) -> np.ndarray:
    """Inverse of `interleave` along the last axis."""
    bits = np.asarray(bits)
    perm = _interleave_perm(bits.shape[-1], n_rows)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return bits[..., inv]
