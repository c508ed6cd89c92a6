"""Binary netpbm readers/writers: P6 (PPM, RGB) and P5 (PGM, gray).

Only maxval 255 is supported. Headers may contain comments and arbitrary
whitespace; parse failures raise NetpbmError carrying the byte offset at
which the problem was detected.
"""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    """Malformed netpbm data. ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class _HeaderScanner:
    """Tokenizer for netpbm headers: skips whitespace and '#' comments."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def _skip_filler(self):
        raw, n = self.raw, len(self.raw)
        while self.pos < n:
            c = raw[self.pos]
            if c in b" \t\r\n\x0b\x0c":
                self.pos += 1
            elif c == ord("#"):
                while self.pos < n and raw[self.pos] not in b"\r\n":
                    self.pos += 1
            else:
                return

    def token(self, what: str) -> bytes:
        self._skip_filler()
        start = self.pos
        raw, n = self.raw, len(self.raw)
        while self.pos < n and raw[self.pos] not in b" \t\r\n\x0b\x0c#":
            self.pos += 1
        if self.pos == start:
            raise NetpbmError(f"expected {what}, found end of header", start)
        return raw[start : self.pos]

    def int_token(self, what: str) -> int:
        start = self.pos
        tok = self.token(what)
        try:
            return int(tok)
        except ValueError:
            raise NetpbmError(f"expected integer {what}, got {tok!r}", start) from None


def _parse(raw: bytes, magic: bytes, channels: int) -> np.ndarray:
    s = _HeaderScanner(raw)
    got = s.token("magic number")
    if got != magic:
        raise NetpbmError(f"wrong magic: expected {magic.decode()}, got {got!r}", 0)
    width = s.int_token("width")
    height = s.int_token("height")
    if width <= 0 or height <= 0:
        raise NetpbmError(f"nonpositive dimensions {width}x{height}", s.pos)
    maxval_at = s.pos
    maxval = s.int_token("maxval")
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval}: only 255 is handled", maxval_at)
    # Exactly one whitespace byte separates the header from the payload.
    if s.pos >= len(raw) or raw[s.pos] not in b" \t\r\n\x0b\x0c":
        raise NetpbmError("missing whitespace after maxval", s.pos)
    s.pos += 1
    need = width * height * channels
    payload = raw[s.pos : s.pos + need]
    if len(payload) < need:
        raise NetpbmError(
            f"truncated payload: need {need} bytes, have {len(payload)}", s.pos + len(payload)
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, channels).copy()


def read_ppm_bytes(raw: bytes) -> np.ndarray:
    """P6 bytes -> uint8 array [H, W, 3]."""
    return _parse(raw, b"P6", 3)


def read_pgm_bytes(raw: bytes) -> np.ndarray:
    """P5 bytes -> uint8 array [H, W]."""
    return _parse(raw, b"P5", 1)


def write_ppm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise NetpbmError(f"PPM writer needs [H, W, 3], got {img.shape}", 0)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes()


def write_pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise NetpbmError(f"PGM writer needs [H, W], got {img.shape}", 0)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes()


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return read_ppm_bytes(f.read())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return read_pgm_bytes(f.read())


def write_ppm(path: str, img: np.ndarray):
    with open(path, "wb") as f:
        f.write(write_ppm_bytes(img))


def write_pgm(path: str, img: np.ndarray):
    with open(path, "wb") as f:
        f.write(write_pgm_bytes(img))
