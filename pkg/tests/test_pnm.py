import numpy as np
import pytest

from ssnet.errors import FormatError
from ssnet.pnm import read_pgm, read_pnm, read_ppm, write_pgm, write_pnm, write_ppm


def test_ppm_round_trip(tmp_path, rng):
    image = rng.integers(0, 256, size=(3, 5, 7)) / 255.0
    path = tmp_path / "image.ppm"
    write_ppm(path, image)
    np.testing.assert_allclose(read_ppm(path), image, atol=1e-12)


def test_pgm_sixteen_bit(tmp_path):
    labels = np.array([[0, 300], [65535, 7]])
    path = tmp_path / "labels.pgm"
    write_pgm(path, labels, maxval=65535)
    raster = read_pgm(path)
    assert raster[0, 1] == 300
    np.testing.assert_array_equal(raster, labels)


def test_header_comments(tmp_path):
    path = tmp_path / "commented.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x05\x09")
    raster, maxval = read_pnm(path)
    assert maxval == 255
    np.testing.assert_array_equal(raster, [[5, 9]])


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pnm(path)


def test_truncated_raster(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        read_pnm(path)


def test_sample_above_maxval(tmp_path):
    path = tmp_path / "over.pgm"
    path.write_bytes(b"P5\n1 1\n10\n\x0b")
    with pytest.raises(FormatError):
        read_pnm(path)


def test_wrong_kind(tmp_path):
    path = tmp_path / "gray.pgm"
    write_pgm(path, np.zeros((2, 2), dtype=np.int64))
    with pytest.raises(FormatError):
        read_ppm(path)


def test_write_rejects_out_of_range(tmp_path):
    with pytest.raises(FormatError):
        write_pnm(tmp_path / "x.pgm", np.array([[256]]), maxval=255)
