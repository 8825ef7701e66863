"""
8-bit grayscale image files: binary PGM (P5) parsed here, PNG through the
optional ``pypng`` package.
"""

from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import ImageFormatError

PathLike = Union[str, Path]
SUFFIXES = (".pgm", ".png")


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    end = len(data)
    while len(tokens) < count:
        while pos < end and data[pos:pos + 1].isspace():
            pos += 1
        if pos < end and data[pos:pos + 1] == b"#":
            while pos < end and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < end and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path: PathLike) -> np.ndarray:
    """Return the raster of a binary P5 file as uint8 [H x W] scaled to maxval 255."""
    data = Path(path).read_bytes()
    (magic, width, height, maxval), pos = _header_tokens(data, 4)
    if magic != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w, h, maxv = int(width), int(height), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header") from None
    if not 0 < maxv <= 255:
        raise ImageFormatError(f"{path}: maxval {maxv} is not an 8-bit PGM")
    raster = data[pos + 1: pos + 1 + w * h]
    if len(raster) != w * h:
        raise ImageFormatError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    if int(img.max(initial=0)) > maxv:
        raise ImageFormatError(f"{path}: sample value {int(img.max())} exceeds maxval {maxv}")
    if maxv != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxv).astype(np.uint8)
    return img


def write_pgm(path: PathLike, img: np.ndarray) -> None:
    img = _as_gray_u8(img)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _pypng():
    try:
        import png
    except ImportError:
        raise ImageFormatError(
            "PNG support needs the optional 'pypng' package (pip install robustface[png])"
        ) from None
    return png


def read_png(path: PathLike) -> np.ndarray:
    png = _pypng()
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        pixels = np.vstack([np.asarray(row, dtype=np.uint16) for row in rows])
    except png.Error as e:
        raise ImageFormatError(f"{path}: {e}") from None
    planes = info["planes"]
    pixels = pixels.reshape(height, width, planes)
    if info.get("alpha"):
        pixels = pixels[..., :-1]
    if pixels.shape[2] != 1 or info["bitdepth"] != 8:
        raise ImageFormatError(f"{path}: expected an 8-bit grayscale PNG")
    return pixels[..., 0].astype(np.uint8)


def write_png(path: PathLike, img: np.ndarray) -> None:
    png = _pypng()
    img = _as_gray_u8(img)
    h, w = img.shape
    with open(path, "wb") as f:
        png.Writer(w, h, greyscale=True, bitdepth=8).write(f, img.tolist())


def _as_gray_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 [H x W] grayscale, got {img.dtype} {img.shape}")
    return img


def read_image(path: PathLike) -> np.ndarray:
    """uint8 [H x W] raster of a PGM or PNG file, chosen by suffix."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return read_png(path)
    raise ImageFormatError(f"{path}: unsupported image type '{suffix}'")


def write_image(path: PathLike, img: np.ndarray) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        write_pgm(path, img)
    elif suffix == ".png":
        write_png(path, img)
    else:
        raise ImageFormatError(f"{path}: unsupported image type '{suffix}'")


def to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 [H x W] -> float32 [H x W x 1] in [0, 1]."""
    return (img.astype(np.float32) / np.float32(255.0))[..., None]


def quantize(img: np.ndarray) -> np.ndarray:
    """float [H x W x 1] in [0, 1] -> uint8 [H x W], rounding to the nearest level."""
    data = np.asarray(img, dtype=np.float64)
    if data.ndim == 3:
        data = data[..., 0]
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
