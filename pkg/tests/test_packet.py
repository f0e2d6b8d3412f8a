"""Framing: header blocks, payload fragmentation, hopping plans."""
from fractions import Fraction

import numpy as np
import pytest

from lrfhss import coding, packet, profiles

RNG = np.random.default_rng(7321)
EU8 = profiles.profile_lookup("EU863-870", 8)
EU9 = profiles.profile_lookup("EU863-870", 9)


def test_syncword_bits():
    bits = packet.SYNCWORD_BITS
    assert len(bits) == 32
    assert coding.bits_to_int(np.asarray(bits)) == 0x2C0F7995


def test_phdr_round_trip():
    rate = profiles.normalize_coding_rate("1/3")
    hdr = packet.Phdr(payload_len=32, coding_rate=rate, grid_coarse=False,
                      modulation="gmsk", seq_id=257)
    bits = hdr.to_bits()
    assert bits.size == packet.PHDR_BITS
    assert packet.Phdr.from_bits(bits) == hdr
    coarse = packet.Phdr(255, profiles.normalize_coding_rate("2/3"),
                         True, "qpsk", 511)
    assert packet.Phdr.from_bits(coarse.to_bits()) == coarse


def test_phdr_rejects_bad_fields():
    rate = profiles.normalize_coding_rate("1/3")
    with pytest.raises(ValueError):
        packet.Phdr(300, rate, False, "gmsk", 1)
    with pytest.raises(ValueError):
        packet.Phdr(10, rate, False, "gmsk", 700)
    with pytest.raises(ValueError):
        packet.Phdr(10, Fraction(3, 4), False, "gmsk", 1)
    with pytest.raises(ValueError):
        packet.Phdr(10, rate, False, "fsk", 1)


def test_header_block_structure():
    hdr = packet.phdr_for(EU8, payload_len=16, seq_id=9, modulation="gmsk")
    block = packet.build_header_block(hdr)
    assert block.size == 114
    assert list(block[:2]) == list(packet.PREAMBLE_BITS)
    assert list(block[2:34]) == list(packet.SYNCWORD_BITS)
    # coded section: tail-biting code of the fields plus their CRC
    fields = hdr.to_bits()
    crc = coding.int_to_bits(coding.crc8(fields), 8)
    want = coding.interleave(
        coding.conv_encode(np.concatenate([fields, crc]), "1/2"))
    assert np.array_equal(packet.header_coded_view(block), want)


def test_encode_payload_round_trip():
    payload = RNG.integers(0, 256, 32, dtype=np.uint8).tobytes()
    stream = packet.encode_payload(payload, "1/3")
    assert stream.size == profiles.coded_payload_bits(32, "1/3") == 834
    frags = packet.fragment_stream(stream)
    assert frags.shape == (18, 50)
    assert np.all(frags[:, :2] == np.array(packet.PREAMBLE_BITS))
    back = packet.assemble_stream(frags, stream.size)
    assert np.array_equal(back, stream)
    # decode: deinterleave, decode, strip and check the trailing CRC
    soft = back * 2.0 - 1.0
    n_info = 8 * (32 + 2)
    dec = coding.viterbi_decode(
        coding.deinterleave(soft), n_info, "1/3")
    body, crc = dec[:-16], dec[-16:]
    assert coding.bits_to_bytes(body) == payload
    assert coding.bits_to_int(crc) == coding.crc16(body)


def test_fragment_padding_is_zero():
    stream = np.ones(100, dtype=np.int64)
    frags = packet.fragment_stream(stream)
    assert frags.shape == (3, 50)
    used = 3 * 48
    tail = frags[2, 2 + (100 - 96):]
    assert np.all(tail == 0)


def test_device_channel_set_progression():
    chans = packet.device_channel_set(EU8, seq_id=11)
    assert chans.size == EU8.n_cf_per_ed
    assert np.all(np.diff(chans) == EU8.grid_slots)
    assert chans[0] == 11 % EU8.grid_slots
    assert np.all(chans < EU8.n_cf)


def test_hopping_plan_properties():
    allowed = set(packet.device_channel_set(EU8, seq_id=5).tolist())
    plan = packet.hopping_plan(EU8, seq_id=5, n_blocks=34)
    assert plan.size == 34
    assert set(plan.tolist()) <= allowed
    assert np.all(np.diff(plan) != 0)      # no immediate repeats


def test_hopping_plan_deterministic_and_distinct():
    a = packet.hopping_plan(EU8, 77, 20)
    b = packet.hopping_plan(EU8, 77, 20)
    assert np.array_equal(a, b)
    seen = {tuple(packet.hopping_plan(EU8, s, 20).tolist())
            for s in range(512)}
    assert len(seen) > 500


def test_hopping_plan_too_long():
    with pytest.raises(packet.PlanTooLong):
        packet.hopping_plan(EU8, 1, packet.MAX_PLAN_BLOCKS + 1)


def test_build_packet_counts():
    payload = bytes(58)
    pkt = packet.build_packet(payload, EU8, seq_id=3)
    assert pkt.n_headers == 3
    assert pkt.n_fragments == 31
    assert pkt.n_blocks == 34
    assert pkt.plan.size == 34
    assert pkt.block_bits(0).size == 114
    assert pkt.block_bits(3).size == 50
    # header blocks are identical replicas
    assert np.array_equal(pkt.block_bits(0), pkt.block_bits(2))


def test_build_packet_rate_2_3():
    pkt = packet.build_packet(b"\x01\x02\x03\x04", EU9, seq_id=4,
                              modulation="qpsk")
    assert pkt.n_headers == 2
    assert pkt.n_fragments == profiles.fragment_count(4, "2/3") == 2
    assert pkt.phdr.modulation == "qpsk"


def test_build_packet_checks_length():
    with pytest.raises(ValueError):
        packet.build_packet(bytes(59), EU8, seq_id=1)
    with pytest.raises(ValueError):
        packet.build_packet(b"", EU8, seq_id=1)


def test_block_bit_len():
    pkt = packet.build_packet(b"ab", EU8, seq_id=2)
    assert pkt.block_bit_len(0) == 114
    assert pkt.block_bit_len(pkt.n_headers) == 50
    assert pkt.block_bits(pkt.n_headers).size == 50
