"""NHWC feature maps and host-side marshalling.

A :class:`Tensor` stores FP16 elements with channel as the fastest-varying
axis, then width, then height; the backing array has shape ``(h, w, c)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

BLOB_MAGIC = b"FACC"
BLOB_VERSION = 1


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    array: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.array)
        if a.ndim != 3:
            raise GeometryError(f"tensor must be (h, w, c), got shape {a.shape}")
        if a.dtype != np.float16:
            a = a.astype(np.float16)
        object.__setattr__(self, "array", np.ascontiguousarray(a))

    @classmethod
    def zeros(cls, side: int, channels: int) -> "Tensor":
        return cls(np.zeros((side, side, channels), np.float16))

    @classmethod
    def from_flat(cls, data, width: int, height: int, channels: int) -> "Tensor":
        data = np.asarray(data, np.float16)
        if data.size != width * height * channels:
            raise GeometryError("data length must equal w*h*c")
        return cls(data.reshape(height, width, channels))

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def channels(self) -> int:
        return self.array.shape[2]

    @property
    def side(self) -> int:
        if self.width != self.height:
            raise GeometryError("tensor surface is not square")
        return self.width

    @property
    def data(self) -> np.ndarray:
        """Flat NHWC payload (channel lowest)."""
        return self.array.reshape(-1)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def bits(self) -> np.ndarray:
        return self.array.view(np.uint16)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.array.shape == other.array.shape and np.array_equal(
            self.bits(), other.bits()
        )

    def __repr__(self):
        return f"Tensor({self.channels}x{self.height}x{self.width})"


def output_side(w: int, k: int, p: int, s: int) -> int:
    if s < 1:
        raise GeometryError("stride must be >= 1")
    span = w - k + 2 * p
    if span < 0 or span % s:
        raise GeometryError(f"(w={w} - k={k} + 2p={2 * p}) not divisible by s={s}")
    return span // s + 1


def pads4(p) -> tuple[int, int, int, int]:
    """Normalise an int or (top, left, bottom, right) tuple."""
    if isinstance(p, int):
        return (p, p, p, p)
    p = tuple(int(v) for v in p)
    if len(p) != 4:
        raise GeometryError("padding must be an int or (top, left, bottom, right)")
    return p


def pad_surface(t: Tensor, p) -> Tensor:
    top, left, bottom, right = pads4(p)
    if min(top, left, bottom, right) < 0:
        raise GeometryError("negative padding")
    if not (top or left or bottom or right):
        return t
    out = np.zeros(
        (t.height + top + bottom, t.width + left + right, t.channels), np.float16
    )
    out[top : top + t.height, left : left + t.width] = t.array
    return Tensor(out)


def crop_surface(t: Tensor, p) -> Tensor:
    top, left, bottom, right = pads4(p)
    return Tensor(t.array[top : t.height - bottom, left : t.width - right])


def aligned(c: int, parallelism: int) -> int:
    return -(-c // parallelism) * parallelism


def pad_channels(t: Tensor, parallelism: int) -> Tensor:
    if parallelism < 1:
        raise GeometryError("parallelism must be >= 1")
    c = aligned(t.channels, parallelism)
    if c == t.channels:
        return t
    out = np.zeros((t.height, t.width, c), np.float16)
    out[:, :, : t.channels] = t.array
    return Tensor(out)


@dataclass(frozen=True, eq=False)
class GemmTile:
    """Cache lines for one output point: ``lines`` has shape (L, parallelism)."""

    lines: np.ndarray
    atoms: int


def _windows(a: np.ndarray, k: int, s: int) -> np.ndarray:
    """(oh, ow, k, k, c) strided view of every k x k window."""
    h, w, c = a.shape
    oh = output_side(h, k, 0, s)
    ow = output_side(w, k, 0, s)
    st = a.strides
    return np.lib.stride_tricks.as_strided(
        a,
        shape=(oh, ow, k, k, c),
        strides=(st[0] * s, st[1] * s, st[0], st[1], st[2]),
        writeable=False,
    )


def im2col_lines(t: Tensor, k: int, s: int, parallelism: int) -> np.ndarray:
    """All tiles as one array of shape (oh, ow, G*k*k, parallelism).

    Line order inside a tile: channel group outermost, then kernel row, then
    kernel column; each line is one channel-parallel atom.
    """
    if t.channels % parallelism:
        raise GeometryError("channels must be aligned to parallelism")
    win = _windows(t.array, k, s)
    oh, ow = win.shape[:2]
    g = t.channels // parallelism
    win = win.reshape(oh, ow, k, k, g, parallelism)
    win = win.transpose(0, 1, 4, 2, 3, 5)
    return np.ascontiguousarray(win).reshape(oh, ow, g * k * k, parallelism)


def im2col_tiles(t: Tensor, k: int, s: int, parallelism: int) -> list[GemmTile]:
    """Tiles in surface order: output column fastest, then output row."""
    lines = im2col_lines(t, k, s, parallelism)
    oh, ow, n, _ = lines.shape
    return [GemmTile(lines[i, j], k * k) for i in range(oh) for j in range(ow)]


def pool_lines(t: Tensor, k: int, s: int, parallelism: int) -> np.ndarray:
    """Pooling windows as (oh, ow, G, k*k, parallelism)."""
    if t.channels % parallelism:
        raise GeometryError("channels must be aligned to parallelism")
    win = _windows(t.array, k, s)
    oh, ow = win.shape[:2]
    g = t.channels // parallelism
    win = win.reshape(oh, ow, k * k, g, parallelism).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(win)


def serdes_pack(words, burst_len: int = 8) -> np.ndarray:
    """Shift 16-bit words into lines of ``burst_len`` lanes; word 0 lands in lane 0."""
    w = np.asarray(words, dtype=np.uint16).reshape(-1)
    if burst_len < 1 or w.size % burst_len:
        raise GeometryError(f"{w.size} words do not fill lines of {burst_len}")
    return w.reshape(-1, burst_len).copy()


def serdes_unpack(lines) -> np.ndarray:
    return np.asarray(lines, dtype=np.uint16).reshape(-1).copy()


def line_to_int(line) -> int:
    """128-bit integer image of one line (lane 0 in the low bits)."""
    out = 0
    for i, v in enumerate(np.asarray(line, np.uint16)):
        out |= int(v) << (16 * i)
    return out


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise GeometryError("nothing to concatenate")
    h, w = parts[0].height, parts[0].width
    for p in parts:
        if (p.height, p.width) != (h, w):
            raise GeometryError("surface mismatch in concatenation")
    if len(parts) == 1:
        return parts[0]
    return Tensor(np.concatenate([p.array for p in parts], axis=2))


# --- tensor blob files -------------------------------------------------------


def write_tensor(path, t: Tensor) -> None:
    header = BLOB_MAGIC + bytes([BLOB_VERSION]) + struct.pack(
        "<III", t.width, t.height, t.channels
    )
    Path(path).write_bytes(header + t.array.astype("<f2").tobytes())


def read_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: bad tensor magic")
    if raw[4] != BLOB_VERSION:
        raise ValueError(f"{path}: unsupported tensor version {raw[4]}")
    w, h, c = struct.unpack_from("<III", raw, 5)
    payload = np.frombuffer(raw, dtype="<f2", offset=17)
    if payload.size != w * h * c:
        raise ValueError(f"{path}: payload size mismatch")
    return Tensor.from_flat(payload.astype(np.float16), w, h, c)
