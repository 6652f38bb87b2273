"""Flat binary tensor maps and a small CSV fallback.

One file holds a [N, C, H, W] float32 array behind an 8-integer
little-endian header: magic, version, N, C, H, W, scoring id and
temperature in thousandths. Score maps use C=1; images, label maps and
masks reuse the same container.
"""

from __future__ import annotations

import numpy as np

MAGIC = int.from_bytes(b"BFTN", "little")
VERSION = 1

SCORING_IDS = {"raw": 0, "msp": 1, "entropy": 2}
SCORING_NAMES = {v: k for k, v in SCORING_IDS.items()}


def write_tensor_map(path, array: np.ndarray, scoring: str = "raw", temperature: float = 1.0) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 3:  # [N,H,W] score/label maps
        arr = arr[:, None]
    if arr.ndim == 2:  # [N,D] point sets
        arr = arr[:, :, None, None]
    if arr.ndim == 1:
        arr = arr[:, None, None, None]
    if arr.ndim != 4:
        raise ValueError(f"expected up to 4-D data, got shape {array.shape}")
    if scoring not in SCORING_IDS:
        raise ValueError(f"unknown scoring {scoring!r}")
    header = np.array([MAGIC, VERSION, *arr.shape, SCORING_IDS[scoring],
                       int(round(temperature * 1000))], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_map(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(32), dtype="<i4")
        if header[0] != MAGIC:
            raise ValueError(f"{path}: bad magic")
        if header[1] != VERSION:
            raise ValueError(f"{path}: unsupported version {header[1]}")
        n, c, h, w = (int(v) for v in header[2:6])
        data = np.frombuffer(fh.read(4 * n * c * h * w), dtype="<f4").reshape(n, c, h, w)
    info = {
        "scoring": SCORING_NAMES.get(int(header[6]), "raw"),
        "temperature": int(header[7]) / 1000.0,
    }
    return data.copy(), info


def write_csv(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("CSV export handles 1-D or 2-D arrays")
    np.savetxt(path, arr, delimiter=",", fmt="%.17g")


def read_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM from a [3,H,W] image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {img.shape}")
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        fh.readline()  # max value
        raw = np.frombuffer(fh.read(3 * h * w), dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
