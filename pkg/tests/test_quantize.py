import numpy as np
import pytest

from fedlora import quant as Q
from fedlora.errors import ConfigError, IntegrityError


class TestAffineParams:
    def test_nonnegative_slice(self):
        qp = Q.compute_affine_params(np.array([[0.0, 15.0]], np.float32), axis=0, bits=8)
        assert qp.scale[0] == pytest.approx(15 / 255)
        assert qp.zero_point[0] == 0

    def test_symmetric_slice_two_bits(self):
        qp = Q.compute_affine_params(np.array([[-1.0, 1.0]], np.float32), axis=0, bits=2)
        assert qp.scale[0] == pytest.approx(2 / 3)
        assert qp.zero_point[0] == 2  # round(1.5) away from zero

    def test_all_zero_slice_fallback(self):
        qp = Q.compute_affine_params(np.zeros((3, 4), np.float32), axis=0, bits=4)
        assert np.all(qp.scale == 1.0)
        assert np.all(qp.zero_point == 0)
        q = Q.quantize(np.zeros((3, 4), np.float32), qp)
        assert np.all(q.codes() == 0)

    def test_range_always_widened_to_include_zero(self):
        # a strictly positive slice still maps 0 to an exact code
        x = np.array([[3.0, 5.0]], np.float32)
        qp = Q.compute_affine_params(x, 0, 8)
        assert qp.zero_point[0] == 0
        assert qp.scale[0] == pytest.approx(5 / 255)

    def test_unknown_bits_rejected(self):
        with pytest.raises(ConfigError):
            Q.compute_affine_params(np.ones((2, 2), np.float32), 0, 3)

    def test_channel_axis_defaults(self):
        assert Q.channel_axis_for((8, 4, 3, 3)) == 0
        assert Q.channel_axis_for((256, 10)) == 1
        assert Q.channel_axis_for((10,)) == 0


class TestRoundTrip:
    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_error_bound_random_tensors(self, bits):
        rng = np.random.default_rng(bits)
        for trial in range(20):
            shape = tuple(int(s) for s in rng.integers(1, 8, size=int(rng.integers(1, 5))))
            x = (rng.normal(size=shape) * rng.uniform(0.05, 20)).astype(np.float32)
            axis = Q.channel_axis_for(shape)
            qp = Q.compute_affine_params(x, axis, bits)
            xh = Q.dequantize(Q.quantize(x, qp)).data
            bshape = [shape[i] if i == axis else 1 for i in range(len(shape))]
            bound = qp.scale.reshape(bshape) / 2 + 1e-6
            assert (np.abs(x - xh) <= bound).all()

    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_code_idempotence(self, bits):
        rng = np.random.default_rng(100 + bits)
        x = (rng.normal(size=(6, 5)) * 4).astype(np.float32)
        qp = Q.compute_affine_params(x, 1, bits)
        q1 = Q.quantize(x, qp)
        q2 = Q.quantize(Q.dequantize(q1).data, qp)
        assert q1.packed == q2.packed

    def test_grid_points_roundtrip_exactly(self):
        qp = Q.QuantParams(bits=4, axis=0,
                           scale=np.array([0.25], np.float32),
                           zero_point=np.array([5], np.int32))
        codes = np.arange(16, dtype=np.uint8).reshape(1, 16)
        x = 0.25 * (codes.astype(np.float32) - 5)
        q = Q.quantize(x, qp)
        assert np.array_equal(q.codes(), codes)
        assert np.array_equal(Q.dequantize(q).data, x)

    def test_out_of_range_values_clamp_to_end_codes(self):
        qp = Q.QuantParams(bits=8, axis=0,
                           scale=np.array([0.1], np.float32),
                           zero_point=np.array([128], np.int32))
        x = np.array([[-1e6, 1e6]], np.float32)
        codes = Q.quantize(x, qp).codes()
        assert codes[0, 0] == 0 and codes[0, 1] == 255

    def test_zero_point_code_dequantizes_to_exact_zero(self):
        qp = Q.QuantParams(bits=8, axis=0,
                           scale=np.array([0.37], np.float32),
                           zero_point=np.array([77], np.int32))
        q = Q.quantize(np.zeros((1, 9), np.float32), qp)
        assert np.all(q.codes() == 77)
        assert np.all(Q.dequantize(q).data == 0.0)

    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_monotonicity_within_slice(self, bits):
        rng = np.random.default_rng(200 + bits)
        x = np.sort(rng.normal(size=(1, 50)).astype(np.float32) * 3, axis=1)
        qp = Q.compute_affine_params(x, 0, bits)
        codes = Q.quantize(x, qp).codes()[0]
        assert np.all(np.diff(codes.astype(np.int32)) >= 0)

    def test_shape_restored(self):
        rng = np.random.default_rng(300)
        x = rng.normal(size=(3, 4, 2, 2)).astype(np.float32)
        qp = Q.compute_affine_params(x, 0, 2)
        assert Q.dequantize(Q.quantize(x, qp)).data.shape == x.shape


class TestPacking:
    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_bijection_all_lengths(self, bits):
        rng = np.random.default_rng(bits)
        for n in range(0, 65):
            codes = rng.integers(0, 1 << bits, size=n).astype(np.uint8)
            packed = Q.pack_codes(codes, bits)
            assert len(packed) == Q.packed_code_bytes(n, bits)
            assert np.array_equal(Q.unpack_codes(packed, bits, n), codes)

    def test_little_endian_bit_layout(self):
        # codes [1, 2, 3, 0] at 2 bits: byte = 1 | 2<<2 | 3<<4 = 0b00111001
        packed = Q.pack_codes(np.array([1, 2, 3, 0], np.uint8), 2)
        assert packed == bytes([0b00111001])
        # codes [0xA, 0x3] at 4 bits: byte = 0xA | 0x3<<4
        assert Q.pack_codes(np.array([0xA, 0x3], np.uint8), 4) == bytes([0x3A])

    def test_wrong_length_rejected(self):
        with pytest.raises(IntegrityError):
            Q.unpack_codes(b"\x00\x00", 8, 5)

    def test_out_of_range_code_rejected(self):
        with pytest.raises(Exception):
            Q.pack_codes(np.array([4], np.uint8), 2)


class TestPayloadBytes:
    def test_one_channel_256_elements(self):
        assert Q.quantized_payload_bytes((1, 256), 0, 8) == 256 + 8

    def test_zero_elements_channel_overhead_only(self):
        assert Q.quantized_payload_bytes((4, 0), 0, 8) == 32

    def test_packing_arithmetic(self):
        assert Q.quantized_payload_bytes((1, 7), 0, 2) == 2 + 8

    def test_matches_quantizer_output(self):
        rng = np.random.default_rng(7)
        for bits in (2, 4, 8):
            x = rng.normal(size=(5, 6, 2, 2)).astype(np.float32)
            qp = Q.compute_affine_params(x, 0, bits)
            q = Q.quantize(x, qp)
            want = Q.quantized_payload_bytes(x.shape, 0, bits)
            got = len(q.packed) + q.params.channels * Q.CHANNEL_OVERHEAD_BYTES
            assert got == want
