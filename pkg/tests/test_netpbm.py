import numpy as np
import pytest

from unia import netpbm


def test_ppm_round_trip_bytes():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    raw = netpbm.write_ppm_bytes(img)
    back = netpbm.read_ppm_bytes(raw)
    np.testing.assert_array_equal(back, img)
    assert netpbm.write_ppm_bytes(back) == raw


def test_pgm_round_trip_bytes():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(4, 4), dtype=np.uint8)
    raw = netpbm.write_pgm_bytes(img)
    np.testing.assert_array_equal(netpbm.read_pgm_bytes(raw), img)


def test_round_trip_files(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(8, 3, 3), dtype=np.uint8)
    path = tmp_path / "x.ppm"
    netpbm.write_ppm(str(path), img)
    np.testing.assert_array_equal(netpbm.read_ppm(str(path)), img)


def test_header_with_comments_and_whitespace():
    raw = b"P5\n# a comment\n  4\t4 # trailing\n255\n" + bytes(16)
    img = netpbm.read_pgm_bytes(raw)
    assert img.shape == (4, 4)
    assert (img == 0).all()


def test_payload_byte_after_maxval_not_eaten():
    # First payload byte is '\n' (10): only one separator byte is consumed.
    payload = bytes([10]) * 4
    raw = b"P5\n2 2\n255\n" + payload
    img = netpbm.read_pgm_bytes(raw)
    assert (img == 10).all()


def test_wrong_magic_rejected_with_offset():
    with pytest.raises(netpbm.NetpbmError) as exc:
        netpbm.read_pgm_bytes(b"P6\n2 2\n255\n" + bytes(12))
    assert exc.value.offset == 0
    assert "magic" in str(exc.value)


def test_truncated_payload_rejected_with_offset():
    raw = b"P5\n4 4\n255\n" + bytes(10)
    with pytest.raises(netpbm.NetpbmError) as exc:
        netpbm.read_pgm_bytes(raw)
    assert "truncated" in str(exc.value)
    assert exc.value.offset == len(raw)


def test_maxval_65535_rejected():
    with pytest.raises(netpbm.NetpbmError) as exc:
        netpbm.read_pgm_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    assert "65535" in str(exc.value)


def test_garbage_header_token():
    with pytest.raises(netpbm.NetpbmError) as exc:
        netpbm.read_pgm_bytes(b"P5\nxx 2\n255\n" + bytes(4))
    assert "integer" in str(exc.value)


def test_nonpositive_dimensions_rejected():
    with pytest.raises(netpbm.NetpbmError):
        netpbm.read_pgm_bytes(b"P5\n0 2\n255\n")
