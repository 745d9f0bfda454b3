"""Image file formats used by the dataset and the CLI.

PFM carries raw float maps (depth, uncertainty), 16-bit PGM carries the
grayscale focal-stack frames, and 8-bit PPM carries colorized previews.
Nothing here needs an image codec library.
"""

from __future__ import annotations

import numpy as np

from .errors import DataIOError

# PFM scanlines are stored bottom-to-top; a negative scale marks little-endian.


def write_pfm(path, data: np.ndarray) -> None:
    """Write a single-channel little-endian PFM float map."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise DataIOError(f"write_pfm expects an H x W map, got shape {arr.shape} ({path})")
    h, w = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(b"Pf\n")
            f.write(f"{w} {h}\n".encode("ascii"))
            f.write(b"-1.0\n")
            f.write(np.flipud(arr).astype("<f4").tobytes())
    except OSError as e:
        raise DataIOError(f"failed writing PFM {path}: {e}") from e


def read_pfm(path) -> np.ndarray:
    """Read a PFM float map (grayscale or color) as float64."""
    try:
        with open(path, "rb") as f:
            header = f.readline().rstrip()
            if header == b"Pf":
                channels = 1
            elif header == b"PF":
                channels = 3
            else:
                raise DataIOError(f"{path}: not a PFM file (header {header!r})")
            dims = f.readline().split()
            w, h = int(dims[0]), int(dims[1])
            scale = float(f.readline())
            dtype = "<f4" if scale < 0 else ">f4"
            buf = f.read(w * h * channels * 4)
    except OSError as e:
        raise DataIOError(f"failed reading PFM {path}: {e}") from e
    img = np.frombuffer(buf, dtype=dtype).reshape(h, w, channels) if channels == 3 \
        else np.frombuffer(buf, dtype=dtype).reshape(h, w)
    return np.flipud(img).astype(np.float64)


def write_pgm16(path, data: np.ndarray) -> None:
    """Write an H x W image with values in [0,1] as a 16-bit binary PGM."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DataIOError(f"write_pgm16 expects an H x W image, got {arr.shape} ({path})")
    q = np.clip(np.rint(arr * 65535.0), 0, 65535).astype(">u2")
    h, w = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            f.write(q.tobytes())
    except OSError as e:
        raise DataIOError(f"failed writing PGM {path}: {e}") from e


def _read_pnm_header(f, path, magic):
    if f.readline().rstrip() != magic:
        raise DataIOError(f"{path}: expected {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise DataIOError(f"{path}: truncated header")
        line = line.split(b"#", 1)[0]
        fields.extend(line.split())
    return int(fields[0]), int(fields[1]), int(fields[2])


def read_pgm16(path) -> np.ndarray:
    """Read a 16-bit binary PGM back to float64 values in [0,1]."""
    try:
        with open(path, "rb") as f:
            w, h, maxval = _read_pnm_header(f, path, b"P5")
            if maxval != 65535:
                raise DataIOError(f"{path}: expected 16-bit PGM, maxval {maxval}")
            buf = f.read(w * h * 2)
    except OSError as e:
        raise DataIOError(f"failed reading PGM {path}: {e}") from e
    img = np.frombuffer(buf, dtype=">u2").reshape(h, w)
    return img.astype(np.float64) / 65535.0


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 image with values in [0,1] as binary 8-bit PPM."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataIOError(f"write_ppm expects H x W x 3, got {arr.shape} ({path})")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(q.tobytes())
    except OSError as e:
        raise DataIOError(f"failed writing PPM {path}: {e}") from e


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            w, h, maxval = _read_pnm_header(f, path, b"P6")
            buf = f.read(w * h * 3)
    except OSError as e:
        raise DataIOError(f"failed reading PPM {path}: {e}") from e
    img = np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


# Anchor points of the viridis colormap (public-domain), linearly interpolated
# to a 256-entry lookup table for depth/uncertainty previews.
_VIRIDIS_ANCHORS = np.array([
    [0.267004, 0.004874, 0.329415],
    [0.282623, 0.140926, 0.457517],
    [0.253935, 0.265254, 0.529983],
    [0.206756, 0.371758, 0.553117],
    [0.163625, 0.471133, 0.558148],
    [0.127568, 0.566949, 0.550556],
    [0.134692, 0.658636, 0.517649],
    [0.266941, 0.748751, 0.440573],
    [0.477504, 0.821444, 0.318195],
    [0.741388, 0.873449, 0.149561],
    [0.993248, 0.906157, 0.143936],
], dtype=np.float64)


def _viridis_lut() -> np.ndarray:
    xs = np.linspace(0.0, 1.0, len(_VIRIDIS_ANCHORS))
    grid = np.linspace(0.0, 1.0, 256)
    return np.stack([np.interp(grid, xs, _VIRIDIS_ANCHORS[:, c]) for c in range(3)], axis=1)


_LUT = _viridis_lut()


def colorize(data: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    """Map an H x W array through the fixed perceptual colormap to H x W x 3."""
    arr = np.asarray(data, dtype=np.float64)
    lo = float(arr.min()) if vmin is None else float(vmin)
    hi = float(arr.max()) if vmax is None else float(vmax)
    if hi - lo <= 0:
        idx = np.zeros(arr.shape, dtype=np.int64)
    else:
        idx = np.clip(((arr - lo) / (hi - lo) * 255.0).astype(np.int64), 0, 255)
    return _LUT[idx]
