"""Readers and writers for the on-disk formats: V2ST tensors, PCM16 WAV, binary PGM."""

from __future__ import annotations

import os
import struct

import numpy as np

TENSOR_MAGIC = b"V2ST"


class FormatError(ValueError):
    """Malformed file; the message names the file and byte offset."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


# ------------------------------------------------------------------ tensors


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(arr))


def parse_tensor(buf: bytes, offset: int = 0, path="<bytes>") -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns the array and the next offset."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError(path, offset, f"bad magic {buf[offset:offset + 4]!r}, expected {TENSOR_MAGIC!r}")
    return parse_tensor_body(buf, offset + 4, path)


def parse_tensor_body(buf: bytes, offset: int, path="<bytes>") -> tuple[np.ndarray, int]:
    """Rank, dims and payload of a tensor whose magic has already been consumed."""
    if len(buf) < offset + 4:
        raise FormatError(path, offset, "truncated rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + 4 * rank:
        raise FormatError(path, offset, f"truncated dims (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    need = 4 * count
    if len(buf) < offset + need:
        raise FormatError(path, offset, f"payload truncated: need {need} bytes, have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
    return arr, offset + need


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = parse_tensor(buf, 0, path)
    if end != len(buf):
        raise FormatError(path, end, f"{len(buf) - end} trailing bytes after payload")
    return arr


# ---------------------------------------------------------------------- WAV


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Mono PCM16 little-endian with a 44-byte header; input in [-1, 1] is clipped."""
    pcm = np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    with open(path, "wb") as fh:
        fh.write(header + data)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read mono PCM16; returns float samples in [-1, 1] and the sample rate."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError(path, 0, "not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(buf):
        cid = buf[pos : pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = pos + 8
        if body + size > len(buf):
            raise FormatError(path, pos, f"chunk {cid!r} of {size} bytes runs past end of file")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(path, body, "fmt chunk too short")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", buf, body)
            if tag != 1 or bits != 16 or channels != 1:
                raise FormatError(
                    path, body, f"unsupported encoding (format {tag}, {channels} channels, {bits} bits); need mono PCM16"
                )
            fmt = rate
        elif cid == b"data":
            if fmt is None:
                raise FormatError(path, pos, "data chunk before fmt chunk")
            if size % 2:
                raise FormatError(path, body, "odd PCM16 payload size")
            pcm = np.frombuffer(buf, dtype="<i2", count=size // 2, offset=body)
            return pcm.astype(np.float64) / 32767.0, fmt
        pos = body + size + (size & 1)
    raise FormatError(path, pos, "no data chunk")


# ---------------------------------------------------------------------- PGM


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; float images are taken as [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _pgm_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    while pos < len(buf):
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(path, start, "truncated PGM header")
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Returns a ``uint8`` H×W array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError(path, 0, f"bad magic {buf[:2]!r}, expected b'P5'")
    pos = 2
    vals = []
    for _ in range(3):
        tok, pos = _pgm_token(buf, pos, path)
        if not tok.isdigit():
            raise FormatError(path, pos - len(tok), f"expected integer, got {tok!r}")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(path, pos, f"only 8-bit PGM supported (maxval {maxval})")
    pos += 1
    if len(buf) - pos < w * h:
        raise FormatError(path, pos, f"pixel data truncated: need {w * h} bytes, have {len(buf) - pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
