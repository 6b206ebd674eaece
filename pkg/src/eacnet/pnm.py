"""Minimal binary PGM (P5) / PPM (P6) codec, bit-exact and dependency-free."""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    """Malformed PGM/PPM header or payload."""


def _read_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace/comment-separated header tokens; returns (tokens, offset)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise PnmError("truncated header")
        ch = data[i : i + 1]
        if ch in b" \t\r\n":
            i += 1
        elif ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and data[j : j + 1] not in b" \t\r\n":
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= len(data) or data[i : i + 1] not in b" \t\r\n":
        raise PnmError("missing whitespace after header")
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM file.

    Returns uint8 [H,W] for P5 or [H,W,3] for P6 (uint16 when maxval > 255,
    big-endian samples per the format).
    """
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}, need binary P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise PnmError(f"non-numeric header field: {e}") from None
    if width <= 0 or height <= 0:
        raise PnmError(f"bad dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise PnmError(f"bad maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * channels * dtype.itemsize
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise PnmError(f"truncated payload: have {len(payload)} bytes, need {need}")
    arr = np.frombuffer(payload, dtype=dtype)
    if maxval > 255:
        arr = arr.astype(np.uint16)
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3)


def write_pnm(arr: np.ndarray, path, maxval: int = 255) -> None:
    """Write uint [H,W] as P5 or [H,W,3] as P6."""
    if arr.ndim == 2:
        magic = "P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = "P6"
    else:
        raise PnmError(f"cannot encode array of shape {arr.shape}")
    if not 0 < maxval < 65536:
        raise PnmError(f"bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
