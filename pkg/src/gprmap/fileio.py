"""Shared readers/writers: atomic writes, binary parsing, labeled PLY, PGM."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed input file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" (at byte {offset})" if offset is not None else ""
        super().__init__(message + where)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise FormatError(f"{path}: invalid JSON: {exc.msg}", offset) from None


class Reader:
    """Little-endian cursor over a byte buffer."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.offset = 0
        self.what = what

    def _need(self, n: int) -> None:
        if self.offset + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated, wanted {n} more bytes", self.offset)

    def expect_magic(self, magic: bytes) -> None:
        self._need(len(magic))
        got = self.buf[self.offset:self.offset + len(magic)]
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}", self.offset)
        self.offset += len(magic)

    def _unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        self._need(size)
        val = struct.unpack_from(fmt, self.buf, self.offset)
        self.offset += size
        return val

    def u32(self) -> int:
        return self._unpack("<I")[0]

    def f64(self) -> float:
        return self._unpack("<d")[0]

    def bytes(self, n: int) -> bytes:
        self._need(n)
        out = self.buf[self.offset:self.offset + n]
        self.offset += n
        return out

    def string(self) -> str:
        start = self.offset
        raw = self.bytes(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.what}: invalid UTF-8 string", start) from None

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.bytes(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))

    def expect_end(self) -> None:
        if self.offset != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.offset} trailing bytes", self.offset)


# ---------------------------------------------------------------- PLY

def write_ply(path, points: np.ndarray, labels: np.ndarray | None = None, comment: str | None = None) -> None:
    """ASCII PLY with float x,y,z and a uchar ``label`` property."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lab = np.zeros(len(pts), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if len(lab) != len(pts):
        raise ValueError("labels and points differ in length")
    if len(lab) and (lab.min() < 0 or lab.max() > 255):
        raise ValueError("labels must fit in uchar")
    head = ["ply", "format ascii 1.0"]
    if comment:
        head.append(f"comment {comment}")
    head += [f"element vertex {len(pts)}", "property float x", "property float y",
             "property float z", "property uchar label", "end_header"]
    body = [f"{x!r} {y!r} {z!r} {int(l)}" for (x, y, z), l in zip(pts.tolist(), lab.tolist())]
    atomic_write_text(path, "\n".join(head + body) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    text = raw.decode("ascii", errors="strict")
    lines = text.split("\n")
    offsets = np.cumsum([0] + [len(l) + 1 for l in lines])
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic", 0)
    n = None
    props: list[str] = []
    i = 1
    while i < len(lines) and lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok[:2] == ["format", "binary_little_endian"] or tok[:2] == ["format", "binary_big_endian"]:
            raise FormatError(f"{path}: only ascii PLY is supported", int(offsets[i]))
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok and tok[0] == "property":
            props.append(tok[-1])
        i += 1
    if i >= len(lines) or n is None:
        raise FormatError(f"{path}: incomplete header", int(offsets[min(i, len(lines) - 1)]))
    try:
        ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
    except ValueError:
        raise FormatError(f"{path}: x/y/z properties missing", int(offsets[1])) from None
    il = props.index("label") if "label" in props else None
    pts = np.zeros((n, 3))
    lab = np.zeros(n, dtype=np.int64)
    for k in range(n):
        li = i + 1 + k
        if li >= len(lines):
            raise FormatError(f"{path}: expected {n} vertices, found {k}", int(offsets[-1]))
        tok = lines[li].split()
        try:
            pts[k] = float(tok[ix]), float(tok[iy]), float(tok[iz])
            if il is not None:
                lab[k] = int(tok[il])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: malformed vertex line {k}", int(offsets[li])) from None
    return pts, lab


# ---------------------------------------------------------------- PGM

def normalize_to_u8(img: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max map to 0..255; a constant image becomes uniform mid-gray (128)."""
    a = np.asarray(img, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.full(a.shape, 128, dtype=np.uint8), lo, hi
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8), lo, hi


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM; rows of ``img`` become image rows."""
    a = np.asarray(img)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("write_pgm needs a non-empty 2-D array")
    u8, lo, hi = normalize_to_u8(a)
    header = f"P5\n# minmax {lo!r} {hi!r}\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + u8.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM", 0)
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: bad header field", start) from None
    pos += 1
    w, h, _ = fields
    if len(raw) - pos != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes", pos)
    return np.frombuffer(raw[pos:], dtype=np.uint8).reshape(h, w)
