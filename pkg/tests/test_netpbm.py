import numpy as np
import pytest

from memroute import netpbm
from memroute.errors import FormatError


class TestRoundTrip:
    @pytest.mark.parametrize("shape", [(1, 1), (3, 5), (7, 2, 3)])
    def test_bit_exact(self, tmp_path, shape):
        arr = np.random.default_rng(0).integers(0, 256, size=shape, dtype=np.uint8)
        netpbm.write(tmp_path / "x", arr)
        back = netpbm.read(tmp_path / "x")
        assert back.dtype == np.uint8
        np.testing.assert_array_equal(back, arr)

    def test_header_bytes(self):
        assert netpbm.encode(np.zeros((2, 3), np.uint8)).startswith(b"P5\n3 2\n255\n")
        assert netpbm.encode(np.zeros((2, 3, 3), np.uint8)).startswith(b"P6\n3 2\n255\n")

    def test_comment_in_header(self):
        buf = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
        np.testing.assert_array_equal(netpbm.decode(buf), [[0, 255]])


class TestErrors:
    def test_float_rejected(self):
        with pytest.raises(FormatError):
            netpbm.encode(np.zeros((2, 2)))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            netpbm.decode(b"P2\n1 1\n255\n0")

    def test_truncated(self):
        with pytest.raises(FormatError):
            netpbm.decode(b"P5\n2 2\n255\n\x00")

    def test_wide_maxval(self):
        with pytest.raises(FormatError):
            netpbm.decode(b"P5\n1 1\n65535\n\x00\x00")

    def test_bad_shape(self):
        with pytest.raises(FormatError):
            netpbm.encode(np.zeros((2, 2, 4), np.uint8))


class TestConversion:
    def test_rounding_and_clipping(self):
        out = netpbm.to_uint8(np.array([-0.5, 0.0, 0.5, 1.0, 2.0]))
        np.testing.assert_array_equal(out, [0, 0, 128, 255, 255])

    def test_float_round_trip_error(self):
        x = np.random.default_rng(0).uniform(size=100)
        assert np.abs(netpbm.to_float(netpbm.to_uint8(x), np.float64) - x).max() <= 0.5 / 255 + 1e-12
