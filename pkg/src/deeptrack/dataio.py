"""On-disk formats: DTDS sequence datasets and binary PGM frames.

DTDS layout (all integers little-endian u32)::

    "DTDS" | version | H | W | T | S | flags | bytes[S][T][C][H][W]

with C = 3 channels [y, v, r] when flags bit 0 (ground truth) is set and
C = 2 channels [v, r] otherwise. One byte per cell per channel.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DTDS"
VERSION = 1
HEADER = struct.Struct("<4s6I")
FLAG_GROUND_TRUTH = 1
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """Sequences as uint8 array (S, T, C, H, W)."""

    data: np.ndarray
    has_ground_truth: bool = True

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 5:
            raise ValueError(f"dataset array must be 5-D (S, T, C, H, W), got {self.data.shape}")
        if self.data.shape[2] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} channels, got {self.data.shape[2]}")

    @classmethod
    def from_arrays(cls, v, r, y=None) -> "Dataset":
        """Build from (S, T, H, W) channel arrays."""
        chans = [v, r] if y is None else [y, v, r]
        return cls(np.stack([np.asarray(c, np.uint8) for c in chans], axis=2), y is not None)

    @classmethod
    def empty(cls, grid_h: int, grid_w: int, seq_len: int, has_ground_truth: bool = True):
        c = 3 if has_ground_truth else 2
        return cls(np.zeros((0, seq_len, c, grid_h, grid_w), np.uint8), has_ground_truth)

    @property
    def n_channels(self) -> int:
        return 3 if self.has_ground_truth else 2

    @property
    def n_sequences(self) -> int:
        return self.data.shape[0]

    @property
    def seq_len(self) -> int:
        return self.data.shape[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[3], self.data.shape[4]

    @property
    def v(self) -> np.ndarray:
        return self.data[:, :, -2]

    @property
    def r(self) -> np.ndarray:
        return self.data[:, :, -1]

    @property
    def y(self) -> np.ndarray:
        if not self.has_ground_truth:
            raise ValueError("dataset has no ground truth")
        return self.data[:, :, 0]

    def observations(self, seq: int) -> np.ndarray:
        """(T, H, W, 2) uint8 network input [v, r] for one sequence."""
        return np.moveaxis(self.data[seq, :, -2:], 1, -1)

    def ground_truth(self, seq: int) -> np.ndarray:
        return self.y[seq]

    def validate(self) -> None:
        if self.data.max(initial=0) > 1:
            raise ValueError("channel values must be 0 or 1")
        if np.any(self.r > self.v):
            raise ValueError("observed occupancy set on an invisible cell")

    def subset(self, index) -> "Dataset":
        return Dataset(self.data[index], self.has_ground_truth)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.has_ground_truth == other.has_ground_truth
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


def write_dataset(path, dataset: Dataset) -> None:
    s, t, _, h, w = dataset.data.shape
    flags = FLAG_GROUND_TRUTH if dataset.has_ground_truth else 0
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, h, w, t, s, flags))
        fh.write(dataset.data.tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < HEADER.size:
        raise DatasetFormatError("truncated header", len(buf))
    _, version, h, w, t, s, flags = HEADER.unpack_from(buf)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if flags & ~FLAG_GROUND_TRUTH:
        raise DatasetFormatError(f"unknown flags {flags:#x}", 24)
    has_gt = bool(flags & FLAG_GROUND_TRUTH)
    c = 3 if has_gt else 2
    expected = s * t * c * h * w
    body = len(buf) - HEADER.size
    if body < expected:
        raise DatasetFormatError(f"truncated payload: expected {expected} bytes, found {body}", len(buf))
    if body > expected:
        raise DatasetFormatError(f"{body - expected} trailing bytes", HEADER.size + expected)
    data = np.frombuffer(buf, dtype=np.uint8, offset=HEADER.size).reshape(s, t, c, h, w)
    return Dataset(data.copy(), has_gt)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greymap, maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min(initial=0) < 0 or img.max(initial=0) > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    """Reader for the files write_pgm produces (P5, maxval 255, no comments)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    m = _PGM_HEADER.match(buf)
    if m is None:
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pixels = buf[m.end():m.end() + w * h]
    if len(pixels) != w * h:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
