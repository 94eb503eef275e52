import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gqsa.quant import (
    DomainError,
    QuantParams,
    compute_qparams,
    dequantize_group,
    dequantize_rows,
    pack_codes,
    pack_nibbles,
    packed_nbytes,
    qparams_rows,
    quantize_group,
    quantize_rows,
    round_half_away,
    unpack_codes,
    unpack_nibbles,
)

import oracles


@pytest.mark.parametrize(
    "group, bits, scale, zero",
    [
        ([0.0, 1.5, 3.0], 4, 0.2, 0.0),
        ([0.0, 0.0, 0.0], 4, 1e-8, 0.0),
        ([-1.0, 2.0], 4, 0.2, 5.0),
        ([-1.0, 2.0], 2, 1.0, 1.0),
        ([0.0, 255.0], 8, 1.0, 0.0),
    ],
)
def test_compute_qparams_examples(group, bits, scale, zero):
    p = compute_qparams(group, bits)
    assert p.scale == pytest.approx(scale, rel=1e-6)
    assert p.zero == zero
    assert p.bits == bits


def test_quantize_and_dequantize_example():
    q = quantize_group([0.0, 1.5, 3.0], QuantParams(0.2, 0.0, 4))
    assert q.codes.tolist() == [0, 8, 15]
    np.testing.assert_allclose(dequantize_group(q), [0.0, 1.6, 3.0], rtol=1e-6)


def test_out_of_range_clamps():
    p = QuantParams(0.2, 0.0, 4)
    assert quantize_group([10.0], p).codes.tolist() == [15]
    assert quantize_group([-10.0], p).codes.tolist() == [0]


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
def test_endpoints_map_to_code_range(rng, bits):
    for _ in range(50):
        g = rng.standard_normal(16).astype(np.float32) * rng.uniform(0.01, 10)
        p = compute_qparams(g, bits)
        codes = quantize_group(g, p).codes
        assert codes[np.argmin(g)] == 0
        assert codes[np.argmax(g)] == 2**bits - 1


def test_codes_at_zero_point_dequantize_to_zero():
    p = QuantParams(0.37, 6.0, 4)
    g = quantize_group([0.0, 0.0], p)
    assert g.codes.tolist() == [6, 6]
    assert dequantize_group(g).tolist() == [0.0, 0.0]


def test_degenerate_group_zero_is_clamped():
    # huge positive constant: -round(w/1e-8) would be far below 0
    p = compute_qparams([5.0, 5.0], 4)
    assert p.scale == pytest.approx(1e-8) and p.zero == 0.0
    p = compute_qparams([-5.0, -5.0], 4)
    assert p.zero == 15.0


def test_round_half_away():
    x = np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49, -2.5], dtype=np.float32)
    assert round_half_away(x).tolist() == [1, 2, 3, -1, -2, 0, -3]


@pytest.mark.parametrize("bits", [1, 5, 16, 0])
def test_unsupported_bits(bits):
    with pytest.raises(DomainError):
        compute_qparams([0.0, 1.0], bits)
    with pytest.raises(DomainError):
        pack_codes([0], bits)


@pytest.mark.parametrize("bad", [[], [0.0, np.nan], [np.inf, 1.0]])
def test_qparams_domain_errors(bad):
    with pytest.raises(DomainError):
        compute_qparams(bad, 4)


def test_quant_params_requires_positive_scale():
    with pytest.raises(DomainError):
        QuantParams(0.0, 0.0, 4)


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
def test_vectorized_matches_scalar_oracle(rng, bits):
    groups = (rng.standard_normal((200, 8)) * rng.uniform(0.01, 5, (200, 1))).astype(np.float32)
    s, z = qparams_rows(groups, bits)
    codes = quantize_rows(groups, s, z, bits)
    for i, g in enumerate(groups.astype(np.float64)):
        ps, pz = oracles.qparams_scalar(list(g), bits)
        assert s[i] == pytest.approx(ps, rel=1e-6)
        assert z[i] == pz
        ref = oracles.quantize_scalar(list(groups[i]), float(s[i]), float(z[i]), bits)
        assert codes[i].tolist() == ref


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False, width=32), min_size=1, max_size=32),
    st.sampled_from([2, 3, 4, 8]),
)
def test_round_trip_error_bound(values, bits):
    g = np.array(values, dtype=np.float32)
    p = compute_qparams(g, bits)
    err = np.abs(dequantize_group(quantize_group(g, p)).astype(np.float64) - g)
    lo, hi = -p.zero * p.scale, (2**bits - 1 - p.zero) * p.scale
    in_range = (g >= lo - p.scale / 2) & (g <= hi + p.scale / 2)
    # value-relative slack covers float32 rounding of w/s and (c - z) * s
    assert np.all(err[in_range] <= p.scale / 2 + 1e-6 + 1e-6 * np.abs(g[in_range]))
    if np.ptp(g) > 0:
        assert in_range.all()


def test_constant_nonzero_group_is_out_of_range():
    # the 1e-8 scale cannot represent a constant group away from zero
    p = compute_qparams([1.0, 1.0], 2)
    q = quantize_group([1.0, 1.0], p)
    assert q.codes.tolist() == [3, 3]
    np.testing.assert_allclose(dequantize_group(q), [3e-8, 3e-8], rtol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 15), max_size=64))
def test_nibble_round_trip(codes):
    p = pack_nibbles(codes)
    assert len(p.data) == (len(codes) + 1) // 2
    assert unpack_nibbles(p).tolist() == codes


@pytest.mark.parametrize("codes, byte", [([5, 1], 0x15), ([15], 0x0F), ([0, 15], 0xF0)])
def test_nibble_layout(codes, byte):
    assert pack_nibbles(codes).data == bytes([byte])


def test_unpack_nibbles_short_buffer():
    p = pack_nibbles([1, 2])
    with pytest.raises(DomainError):
        unpack_nibbles(p, 3)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([2, 3, 4, 8]), st.data())
def test_pack_matches_bit_reader_oracle(bits, data):
    codes = data.draw(st.lists(st.integers(0, 2**bits - 1), max_size=50))
    packed = pack_codes(codes, bits)
    assert packed.size == packed_nbytes(len(codes), bits)
    assert oracles.read_codes(bytes(packed), bits, len(codes)) == codes
    start = data.draw(st.integers(0, len(codes)))
    count = len(codes) - start
    assert unpack_codes(packed, bits, start, count).tolist() == codes[start:]


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_unused_tail_bits_are_zero(bits):
    codes = [2**bits - 1] * 5
    packed = pack_codes(codes, bits)
    used = 5 * bits
    assert int(packed[-1]) >> (used - 8 * (packed.size - 1)) == 0


def test_pack_rejects_out_of_range_codes():
    with pytest.raises(DomainError):
        pack_codes([16], 4)
    with pytest.raises(DomainError):
        pack_codes([-1], 8)


def test_dequantize_rows_broadcasts():
    out = dequantize_rows([[0, 1], [2, 3]], [1.0, 0.5], [1.0, 0.0])
    np.testing.assert_array_equal(out, [[-1.0, 0.0], [1.0, 1.5]])
