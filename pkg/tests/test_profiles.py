"""Air-interface profile tables, fragmentation, and time-on-air."""
import math
from fractions import Fraction

import pytest

from lrfhss import profiles


def test_symbol_timing_is_exact():
    assert profiles.SYMBOL_RATE_BAUD == 15625.0 / 32.0
    assert profiles.SYMBOL_PERIOD_US == 2048
    # the two representations must be exact inverses
    assert profiles.SYMBOL_RATE_BAUD * profiles.SYMBOL_PERIOD_US == 1e6


def test_block_durations():
    assert profiles.HEADER_BLOCK_BITS == 114
    assert profiles.FRAGMENT_BLOCK_BITS == 50
    assert profiles.HEADER_DURATION_US == 114 * 2048 == 233_472
    assert profiles.FRAGMENT_DURATION_US == 50 * 2048 == 102_400


# (region, data rate) -> (coding rate, headers, max payload, fragments,
# total on-air ms for the largest payload)
MAX_PAYLOAD_GOLDENS = [
    ("EU863-870", 8, "1/3", 3, 58, 31, 3874.816),
    ("EU863-870", 9, "2/3", 2, 123, 32, 3743.744),
    ("EU863-870", 10, "1/3", 3, 58, 31, 3874.816),
    ("EU863-870", 11, "2/3", 2, 123, 32, 3743.744),
    ("US902-928", 5, "1/3", 3, 58, 31, 3874.816),
    ("US902-928", 6, "2/3", 2, 133, 34, 3948.544),
]


@pytest.mark.parametrize(
    "region,dr,rate,n_headers,max_len,n_frag,toa_ms", MAX_PAYLOAD_GOLDENS)
def test_max_payload_time_on_air(region, dr, rate, n_headers, max_len,
                                 n_frag, toa_ms):
    prof = profiles.profile_lookup(region, dr)
    assert prof.coding_rate == profiles.normalize_coding_rate(rate)
    assert prof.n_headers == n_headers
    assert prof.max_payload_bytes == max_len
    assert profiles.fragment_count(max_len, rate) == n_frag
    toa = profiles.profile_time_on_air(prof)
    assert toa.n_fragments == n_frag
    assert math.isclose(toa.total_ms, toa_ms, abs_tol=1e-9)
    # agreement with the coarser published figures
    assert abs(toa.total_ms - round(toa_ms, 1)) <= 0.05


def test_intermediate_payload_time_on_air():
    toa = profiles.time_on_air(32, "1/3", n_headers=1)
    assert toa.n_fragments == 18
    assert math.isclose(toa.total_ms, 233.472 + 18 * 102.4, abs_tol=1e-9)
    assert math.isclose(toa.total_ms, 2076.672, abs_tol=1e-9)


def test_coded_payload_bits_goldens():
    assert profiles.coded_payload_bits(58, "1/3") == 1458
    assert profiles.coded_payload_bits(32, "1/3") == 834
    assert profiles.coded_payload_bits(123, "2/3") == 1509
    assert profiles.coded_payload_bits(133, "2/3") == 1629


def test_fragment_count_matches_simple_rule():
    # ceil((payload_len + 3) / info_bytes_per_fragment) reproduces the
    # exact computation for every payload length at both rates
    for rate, info_bytes in (("1/3", 2), ("2/3", 4)):
        for ell in range(1, 256):
            exact = profiles.fragment_count(ell, rate)
            approx = profiles.fragment_count_approx(ell, rate)
            assert exact == approx == math.ceil((ell + 3) / info_bytes), ell


def test_fragment_count_covers_coded_bits():
    for rate in ("1/3", "2/3"):
        for ell in (1, 7, 32, 58, 123):
            n = profiles.fragment_count(ell, rate)
            coded = profiles.coded_payload_bits(ell, rate)
            assert (n - 1) * 48 < coded <= n * 48


PROFILE_GEOMETRY = [
    # region, dr, ocw_hz, grid_hz, n_cf, slots, per_device
    ("EU863-870", 8, 137_000.0, 3_900.0, 280, 8, 35),
    ("EU863-870", 9, 137_000.0, 3_900.0, 280, 8, 35),
    ("EU863-870", 10, 336_000.0, 3_900.0, 688, 8, 86),
    ("EU863-870", 11, 336_000.0, 3_900.0, 688, 8, 86),
    ("US902-928", 5, 1_523_000.0, 25_400.0, 3120, 52, 60),
    ("US902-928", 6, 1_523_000.0, 25_400.0, 3120, 52, 60),
]


@pytest.mark.parametrize(
    "region,dr,ocw,grid,n_cf,slots,per_device", PROFILE_GEOMETRY)
def test_profile_geometry(region, dr, ocw, grid, n_cf, slots, per_device):
    prof = profiles.profile_lookup(region, dr)
    assert prof.ocw_hz == ocw
    assert prof.grid_hz == grid
    assert prof.n_cf == n_cf
    assert prof.grid_slots == slots
    assert prof.n_cf_per_ed == per_device
    prof.validate()
    # stored channel count stays within one of the bandwidth quotient
    assert abs(prof.n_cf - ocw / profiles.OBW_NOMINAL_HZ) < slots + 1
    assert prof.n_cf == slots * per_device


def test_bit_rates():
    assert profiles.profile_lookup("eu", 8).bit_rate_bps == 162
    assert profiles.profile_lookup("eu", 9).bit_rate_bps == 325


def test_lookup_aliases():
    a = profiles.profile_lookup("EU863-870", 8)
    assert profiles.profile_lookup("eu", 8) is a
    assert profiles.profile_lookup("eu868", 8) is a
    b = profiles.profile_lookup("US902-928", 5)
    assert profiles.profile_lookup("us915", 5) is b
    with pytest.raises(ValueError):
        profiles.profile_lookup("eu", 5)
    with pytest.raises(ValueError):
        profiles.profile_lookup("antarctica", 8)


def test_custom_profile_derives_geometry():
    prof = profiles.custom_profile(
        ocw_hz=39_062.5, grid_hz=3_906.25, coding_rate="1/3", n_headers=1)
    assert prof.grid_slots == 8
    assert prof.n_cf == 80
    assert prof.n_cf_per_ed == 10
    prof.validate()


def test_coding_rate_normalization():
    third = profiles.normalize_coding_rate("1/3")
    assert third == Fraction(1, 3)
    assert profiles.normalize_coding_rate(Fraction(2, 3)) == Fraction(2, 3)
    with pytest.raises(ValueError):
        profiles.normalize_coding_rate("3/4")
