import numpy as np
import pytest

from services.netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm


def test_ppm_round_trip(tmp_path):
    image = np.random.default_rng(0).integers(0, 256, size=(7, 11, 3), dtype=np.uint8)
    path = tmp_path / 'frame.ppm'
    write_ppm(str(path), image)
    assert path.read_bytes().startswith(b'P6\n11 7\n255\n')
    assert np.array_equal(read_ppm(str(path)), image)


def test_pgm_round_trip(tmp_path):
    labels = np.random.default_rng(1).integers(0, 5, size=(5, 9), dtype=np.uint8)
    path = tmp_path / 'mask.pgm'
    write_pgm(str(path), labels)
    assert np.array_equal(read_pgm(str(path)), labels)


def test_header_comments_are_skipped(tmp_path):
    path = tmp_path / 'comment.pgm'
    path.write_bytes(b'P5\n# made by hand\n3 2\n# depth\n255\n' + bytes(range(6)))
    assert read_pgm(str(path)).tolist() == [[0, 1, 2], [3, 4, 5]]


def test_wrong_magic(tmp_path):
    path = tmp_path / 'mask.pgm'
    write_pgm(str(path), np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(NetpbmError):
        read_ppm(str(path))


def test_unsupported_maxval(tmp_path):
    path = tmp_path / 'deep.pgm'
    path.write_bytes(b'P5\n2 1\n65535\n' + bytes(4))
    with pytest.raises(NetpbmError, match='maxval'):
        read_pgm(str(path))


def test_truncated_raster(tmp_path):
    path = tmp_path / 'short.ppm'
    path.write_bytes(b'P6\n4 4\n255\n' + bytes(10))
    with pytest.raises(NetpbmError, match='short.ppm'):
        read_ppm(str(path))


def test_missing_file_names_path(tmp_path):
    with pytest.raises(OSError, match='nowhere.ppm'):
        read_ppm(str(tmp_path / 'nowhere.ppm'))


def test_shape_checks():
    with pytest.raises(NetpbmError):
        write_ppm('unused.ppm', np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(NetpbmError):
        write_pgm('unused.pgm', np.zeros((2, 2, 3), dtype=np.uint8))
