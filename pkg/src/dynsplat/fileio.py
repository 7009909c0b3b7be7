"""Binary tensor container, PGM/PPM image files, and checkpoint directories.

The tensor container is the interchange format for feature maps, depth
grids, and model parameters.  Layout, all little-endian:

    bytes 0..3   magic "GGDT"
    u32          rank
    u32 * rank   dims
    f32 * prod   payload, row-major

Checkpoints are directories holding one ``<name>.ggdt`` file per named
array plus a ``manifest.txt`` with one ``name dim0 dim1 ...`` line per
entry.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GGDT"
TENSOR_SUFFIX = ".ggdt"


class ContainerError(ValueError):
    """Raised on malformed or mismatched tensor container files."""


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        if rank > 8:
            raise ContainerError(f"{path}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ContainerError(
                f"{path}: truncated payload, expected {4 * count} bytes got {len(payload)}"
            )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(dims)


def save_checkpoint(dirpath: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(arrays):
        arr = np.atleast_1d(np.asarray(arrays[name], dtype=np.float64))
        save_tensor(dirpath / f"{name}{TENSOR_SUFFIX}", arr)
        lines.append(name + " " + " ".join(str(d) for d in arr.shape))
    (dirpath / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(dirpath: str | os.PathLike) -> dict[str, np.ndarray]:
    dirpath = Path(dirpath)
    manifest = dirpath / "manifest.txt"
    if not manifest.is_file():
        raise ContainerError(f"{dirpath}: missing manifest.txt")
    arrays: dict[str, np.ndarray] = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        name, dims = parts[0], tuple(int(d) for d in parts[1:])
        arr = load_tensor(dirpath / f"{name}{TENSOR_SUFFIX}")
        if arr.shape != dims:
            raise ContainerError(
                f"{dirpath}/{name}: manifest shape {dims} != stored shape {arr.shape}"
            )
        arrays[name] = arr
    return arrays


# --- portable netpbm images ------------------------------------------------


def save_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    """Write a binary (P5) PGM. Input is HxW in [0,1] or boolean."""
    gray = np.asarray(gray)
    if gray.dtype == bool:
        data = np.where(gray, 255, 0).astype(np.uint8)
    else:
        data = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM into an HxW float array in [0,1]."""
    data, shape = _read_pnm(path, b"P5")
    return data.reshape(shape) / 255.0


def save_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    """Write a binary (P6) PPM. Input is HxWx3 in [0,1]."""
    data = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    data, shape = _read_pnm(path, b"P6")
    return data.reshape(shape + (3,)) / 255.0


def _read_pnm(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(expected_magic):
        raise ContainerError(f"{path}: expected {expected_magic.decode()} file")
    # header = magic, width, height, maxval; '#' comments allowed between tokens
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise ContainerError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if expected_magic == b"P6" else 1
    payload = np.frombuffer(raw, dtype=np.uint8, count=h * w * channels, offset=pos)
    return payload.astype(np.float64), (h, w)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read PNG/PPM/PGM into HxWx3 float RGB in [0,1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return load_ppm(path)
    if path.suffix.lower() == ".pgm":
        gray = load_pgm(path)
        return np.repeat(gray[:, :, None], 3, axis=2)
    from PIL import Image

    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return rgb
