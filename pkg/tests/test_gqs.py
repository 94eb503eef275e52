import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gqsa.core import ShapeError
from gqsa.gqs import (
    BadMagicError,
    ChecksumError,
    FormatError,
    GQSLayer,
    LayerValidationError,
    TruncatedError,
    VersionError,
    build_gqs,
    decompress,
    deserialize,
    footprint,
    footprint_for,
    payload_nbytes,
    payload_sections,
    read_file,
    serialize,
    snap_f16,
    storage_qparams,
    write_file,
)
from gqsa.gqs.fileformat import crc32
from gqsa.quant import pack_codes

from conftest import random_layer
import oracles


# -- layout --------------------------------------------------------------------


def test_topology_fixture(topology_layer):
    assert topology_layer.row_index.tolist() == [0, 1, 3, 3, 4]
    assert topology_layer.group_cols.tolist() == [1, 0, 1, 1]
    assert topology_layer.nnzg == 4
    assert topology_layer.sparsity == 0.5


def test_all_kept_layer_reproduces_weights(rng):
    w = rng.standard_normal((6, 32)).astype(np.float32)
    layer = build_gqs(w, np.ones((6, 4), bool), 8, 4)
    assert layer.nnzg == 24
    err = np.abs(decompress(layer) - w).reshape(6, 4, 8)
    assert np.all(err <= layer.scales.reshape(6, 4, 1) / 2 + 1e-6)


def test_all_pruned_layer():
    layer = build_gqs(np.ones((3, 8)), np.zeros((3, 2), bool), 4, 4)
    assert layer.row_index.tolist() == [0, 0, 0, 0]
    assert layer.group_cols.size == layer.scales.size == layer.packed_codes.size == 0
    np.testing.assert_array_equal(decompress(layer), np.zeros((3, 8)))


def test_single_group_placement():
    # codes 0..15 with s = 1, z = 0 land at columns 16..31 of row 1
    codes = np.arange(16, dtype=np.uint8)
    layer = GQSLayer(
        3, 48, 16, 4, [0, 0, 1, 1], [1], pack_codes(codes, 4),
        np.array([1.0], np.float32), np.array([0.0], np.float32),
    ).validate()
    dense = decompress(layer)
    expected = np.zeros((3, 48), np.float32)
    expected[1, 16:32] = np.arange(16)
    np.testing.assert_array_equal(dense, expected)


def test_decompress_matches_hand_built_oracle(rng):
    for _ in range(20):
        layer = random_layer(rng)
        np.testing.assert_allclose(decompress(layer), oracles.dense_from_layer64(layer), rtol=1e-6, atol=1e-6)


def test_build_gqs_shape_errors():
    with pytest.raises(ShapeError):
        build_gqs(np.ones((2, 6)), np.ones((2, 1), bool), 4, 4)
    with pytest.raises(ShapeError):
        build_gqs(np.ones((2, 8)), np.ones((2, 3), bool), 4, 4)


def test_layer_scales_are_binary16_exact(rng):
    layer = random_layer(rng, rows=16, cols=64, sparsity=0.3)
    assert np.array_equal(snap_f16(layer.scales), layer.scales)
    assert np.array_equal(snap_f16(layer.zeros), layer.zeros)


def test_storage_scale_covers_group_range(rng):
    groups = rng.standard_normal((500, 16)).astype(np.float32)
    for bits in (2, 3, 4, 8):
        s, z = storage_qparams(groups, bits)
        ptp = groups.max(axis=1) - groups.min(axis=1)
        assert np.all(s * (2**bits - 1) >= ptp)
        assert np.all(z >= 0) and np.all(z <= 2**bits - 1)


def _mutate(layer, **changes):
    fields = dict(
        rows=layer.rows, cols=layer.cols, group_size=layer.group_size, bits=layer.bits,
        row_index=layer.row_index.copy(), group_cols=layer.group_cols.copy(),
        packed_codes=layer.packed_codes.copy(), scales=layer.scales.copy(),
        zeros=layer.zeros.copy(), bias=None if layer.bias is None else layer.bias.copy(),
    )
    fields.update(changes)
    return GQSLayer(**fields)


@pytest.mark.parametrize(
    "changes",
    [
        dict(row_index=[0, 2, 1, 3, 4]),
        dict(row_index=[1, 1, 3, 3, 4]),
        dict(group_cols=[1, 1, 0, 1]),
        dict(group_cols=[2, 0, 1, 1]),
        dict(scales=np.array([0.1, 0.0, 0.1, 0.1], np.float32)),
        dict(zeros=np.array([0.0, np.nan, 0.0, 0.0], np.float32)),
        dict(packed_codes=np.zeros(3, np.uint8)),
        dict(bias=np.ones(3, np.float32)),
        dict(cols=6),
        dict(bits=5),
    ],
)
def test_validate_rejects_bad_layers(topology_layer, changes):
    with pytest.raises((LayerValidationError, ValueError)):
        _mutate(topology_layer, **changes).validate()


def test_trailing_code_bits_must_be_zero():
    layer = build_gqs(np.arange(6, dtype=np.float32).reshape(2, 3), np.ones((2, 1), bool), 3, 3)
    bad = layer.packed_codes.copy()
    bad[-1] |= 0x80
    with pytest.raises(LayerValidationError):
        _mutate(layer, packed_codes=bad).validate()


# -- file format ---------------------------------------------------------------


def test_crc_matches_bitwise_oracle(rng):
    for n in (0, 1, 7, 100):
        data = rng.integers(0, 256, n).astype(np.uint8).tobytes()
        assert crc32(data) == oracles.crc32_bitwise(data)
    assert crc32(b"123456789") == 0xCBF43926


def test_empty_model_round_trips():
    blob = serialize([])
    assert len(blob) == 16
    assert blob[:4] == b"GQS1"
    assert deserialize(blob) == []


def test_header_layout(topology_layer):
    blob = serialize([topology_layer])
    magic, version, count = struct.unpack_from("<4sII", blob)
    assert (magic, version, count) == (b"GQS1", 1, 1)
    rows, cols, g, bits, has_bias = struct.unpack_from("<IIIIB", blob, 12)
    assert (rows, cols, g, bits, has_bias) == (4, 8, 4, 4, 1)
    assert len(blob) % 4 == 0
    assert struct.unpack_from("<I", blob, len(blob) - 4)[0] == oracles.crc32_bitwise(blob[4:-4])


def test_round_trip_random_models(rng):
    for _ in range(30):
        layers = [random_layer(rng) for _ in range(int(rng.integers(1, 4)))]
        back = deserialize(serialize(layers))
        assert len(back) == len(layers)
        assert all(a.equals(b) for a, b in zip(layers, back))
        assert serialize(back) == serialize(layers)


def test_file_helpers(tmp_path, topology_layer):
    path = tmp_path / "m.gqs"
    n = write_file(path, [topology_layer])
    assert n == path.stat().st_size
    assert read_file(path)[0].equals(topology_layer)
    with open(path, "rb") as fh:
        assert read_file(fh)[0].equals(topology_layer)


def test_every_single_bit_flip_detected(topology_layer):
    blob = serialize([topology_layer])
    for pos in range(4, len(blob)):
        for bit in range(8):
            bad = bytearray(blob)
            bad[pos] ^= 1 << bit
            with pytest.raises(FormatError):
                deserialize(bytes(bad))


def test_payload_flip_is_a_checksum_error(topology_layer):
    blob = bytearray(serialize([topology_layer]))
    blob[40] ^= 0x10
    with pytest.raises(ChecksumError):
        deserialize(bytes(blob))


def test_bad_magic(topology_layer):
    blob = bytearray(serialize([topology_layer]))
    blob[0:4] = b"GGUF"
    with pytest.raises(BadMagicError):
        deserialize(bytes(blob))


def test_version_checked_after_crc(topology_layer):
    blob = bytearray(serialize([topology_layer]))
    struct.pack_into("<I", blob, 4, 2)
    struct.pack_into("<I", blob, len(blob) - 4, crc32(bytes(blob[4:-4])))
    with pytest.raises(VersionError):
        deserialize(bytes(blob))


@pytest.mark.parametrize("keep", [0, 3, 10, 15, 30, 60, -4, -1])
def test_truncation(topology_layer, keep):
    blob = serialize([topology_layer])
    with pytest.raises(TruncatedError):
        deserialize(blob[:keep] if keep >= 0 else blob[:len(blob) + keep - 4])


def test_payload_sections(topology_layer):
    names = [name for _, name, _, _ in payload_sections(serialize([topology_layer]))]
    assert names == ["row_index", "group_cols", "scales", "zeros", "codes", "bias"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    layers = [random_layer(rng) for _ in range(2)]
    back = deserialize(serialize(layers))
    assert all(a.equals(b) for a, b in zip(layers, back))


# -- footprint -----------------------------------------------------------------


def test_footprint_reference_numbers():
    fp = footprint_for(4096, 4096, 16, 4, 4096 * 256 // 2, has_bias=False)
    assert fp.breakdown["codes"] == 33_554_432
    for k in ("scales", "zeros", "group_cols"):
        assert fp.breakdown[k] == 8_388_608
    assert fp.breakdown["row_index"] == 131_104
    assert fp.breakdown["bias"] == 0
    assert fp.bits_per_weight == pytest.approx(3.51, abs=5e-3)
    assert fp.ratio_vs_fp16 == pytest.approx(4.56, abs=5e-3)


def test_footprint_rejects_wide_codes():
    with pytest.raises(ValueError):
        footprint_for(4, 16, 4, 16, 4, False)


def test_footprint_equals_serialized_payload(rng):
    for _ in range(20):
        layers = [random_layer(rng) for _ in range(int(rng.integers(1, 3)))]
        blob = serialize(layers)
        assert footprint(layers).payload_bits == 8 * payload_nbytes(blob)


def test_footprint_sums_over_layers(rng):
    a, b = random_layer(rng), random_layer(rng)
    total = footprint([a, b])
    assert total.payload_bits == footprint(a).payload_bits + footprint(b).payload_bits
    assert total.weights == a.rows * a.cols + b.rows * b.cols
