"""
Netpbm Service
Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only.
"""
import numpy as np


class NetpbmError(ValueError):
    """Raised for malformed, unsupported or truncated Netpbm files."""


def _write(path, magic, image):
    height, width = image.shape[:2]
    header = f"{magic}\n{width} {height}\n255\n".encode('ascii')
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    except OSError as e:
        raise OSError(f"Cannot write image '{path}': {e}") from e


def _read_header(data, path):
    """Parse magic, width, height, maxval; return them and the raster offset."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        # skip whitespace and comments
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b'#':
            while pos < len(data) and data[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError(f"Truncated header in '{path}'")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1

    magic = tokens[0].decode('ascii', errors='replace')
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError(f"Malformed header in '{path}'")
    return magic, width, height, maxval, pos


def _read(path, expected_magic, channels):
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise OSError(f"Cannot read image '{path}': {e}") from e

    magic, width, height, maxval, offset = _read_header(data, path)
    if magic != expected_magic:
        raise NetpbmError(f"Expected {expected_magic} in '{path}', found '{magic}'")
    if maxval != 255:
        raise NetpbmError(f"Unsupported maxval {maxval} in '{path}'")

    size = width * height * channels
    raster = data[offset:offset + size]
    if len(raster) < size:
        raise NetpbmError(
            f"Truncated raster in '{path}': {len(raster)} of {size} bytes"
        )
    image = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return image.reshape(height, width).copy()
    return image.reshape(height, width, channels).copy()


def write_ppm(path, image):
    """
    Write an RGB image as binary PPM.

    Args:
        path (str): Destination file
        image (np.ndarray): uint8 array, shape (H, W, 3)
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise NetpbmError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    _write(path, 'P6', image)


def read_ppm(path):
    """Read a binary PPM as an (H, W, 3) uint8 array."""
    return _read(path, 'P6', 3)


def write_pgm(path, image):
    """
    Write a single-channel image (e.g. a class-label map) as binary PGM.

    Args:
        path (str): Destination file
        image (np.ndarray): uint8 array, shape (H, W)
    """
    if image.ndim != 2:
        raise NetpbmError(f"PGM needs an (H, W) image, got {image.shape}")
    _write(path, 'P5', image)


def read_pgm(path):
    """Read a binary PGM as an (H, W) uint8 array."""
    return _read(path, 'P5', 1)
