"""Depth-map and label-mask I/O, global standardization and patch extraction.

Supported depth formats:

* ``csv``    -- comma separated decimal reals, one grid row per line.
* ``pgm16``  -- binary PGM (``P5``), maxval 65535, big-endian samples.  Integer
  levels are mapped linearly onto ``[0, 1]`` (``level / maxval``).
* ``f64raw`` -- 16 byte header (little-endian uint64 width, height) followed by
  ``width * height`` little-endian float64 values in row-major order.

Label masks are binary PGM files holding only the values 1 (engraved) and
2 (natural).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

DEPTH_FORMATS = ("csv", "pgm16", "f64raw")


class GridFormatError(ValueError):
    """Raised when a depth map or mask file cannot be parsed."""


class DegenerateSurfaceError(ValueError):
    """Raised when a map has no spread to standardize (constant values)."""


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    pixel_pitch: Optional[float] = None
    source_id: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"depth map must be a non-empty 2D grid, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            r, c = np.argwhere(~np.isfinite(v))[0]
            raise ValueError(f"non-finite depth at row {r}, col {c}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class LabelMask:
    labels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.uint8)
        if lab.ndim != 2:
            raise ValueError("label mask must be 2D")
        bad = ~np.isin(lab, (1, 2))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValueError(f"label mask holds {lab[r, c]} at row {r}, col {c}; only 1 and 2 allowed")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class Patch:
    origin: Tuple[int, int]
    values: np.ndarray

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class PatchSet:
    patches: List[Patch]
    size: int
    stride: int
    source_id: str = ""
    source_shape: Tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self) -> Iterator[Patch]:
        return iter(self.patches)

    def __getitem__(self, i) -> Patch:
        return self.patches[i]


# ---------------------------------------------------------------------------
# readers / writers

def _read_pgm(path) -> Tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise GridFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise GridFormatError(f"{path}: expected binary PGM magic 'P5', got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise GridFormatError(f"{path}: malformed PGM header {tokens!r}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise GridFormatError(f"{path}: bad PGM dimensions/maxval {width}x{height}/{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    need = width * height * np.dtype(dtype).itemsize
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise GridFormatError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=dtype).reshape(height, width), maxval


def _write_pgm(path, levels: np.ndarray, maxval: int) -> None:
    h, w = levels.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(levels, dtype=dtype).tobytes())


def _read_csv(path) -> np.ndarray:
    rows = []
    with open(path, "r") as fh:
        for r, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            row = []
            for c, tok in enumerate(line.split(",")):
                try:
                    val = float(tok)
                except ValueError as exc:
                    raise GridFormatError(f"{path}: cannot parse {tok!r} at row {r}, col {c}") from exc
                if not np.isfinite(val):
                    raise GridFormatError(f"{path}: non-finite value {tok!r} at row {r}, col {c}")
                row.append(val)
            if rows and len(row) != len(rows[0]):
                raise GridFormatError(f"{path}: row {r} has {len(row)} columns, expected {len(rows[0])}")
            rows.append(row)
    if not rows:
        raise GridFormatError(f"{path}: empty csv")
    return np.array(rows, dtype=np.float64)


def _read_f64raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise GridFormatError(f"{path}: truncated f64raw header")
        width, height = struct.unpack("<QQ", header)
        if width == 0 or height == 0:
            raise GridFormatError(f"{path}: zero dimension in f64raw header")
        body = fh.read()
    if len(body) != 8 * width * height:
        raise GridFormatError(f"{path}: expected {8 * width * height} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").reshape(height, width).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise GridFormatError(f"{path}: non-finite value at row {r}, col {c}")
    return values


def guess_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    return {".csv": "csv", ".pgm": "pgm16", ".f64": "f64raw", ".raw": "f64raw"}.get(ext, "csv")


def load_depth_map(path, format: Optional[str] = None) -> DepthMap:
    """Read a depth map in one of :data:`DEPTH_FORMATS`.

    ``format=None`` guesses from the file extension.
    """
    fmt = format or guess_format(path)
    if fmt == "csv":
        values = _read_csv(path)
    elif fmt == "pgm16":
        levels, maxval = _read_pgm(path)
        values = levels.astype(np.float64) / maxval
    elif fmt == "f64raw":
        values = _read_f64raw(path)
    else:
        raise ValueError(f"unknown depth format {fmt!r}; expected one of {DEPTH_FORMATS}")
    return DepthMap(values, source_id=os.path.basename(str(path)))


def save_depth_map(m: DepthMap, path, format: Optional[str] = None) -> None:
    fmt = format or guess_format(path)
    v = m.values
    if fmt == "csv":
        with open(path, "w") as fh:
            for row in v:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
    elif fmt == "f64raw":
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQ", v.shape[1], v.shape[0]))
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    elif fmt == "pgm16":
        lo, hi = v.min(), v.max()
        scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
        _write_pgm(path, np.rint(scaled * 65535).astype(np.uint16), 65535)
    else:
        raise ValueError(f"unknown depth format {fmt!r}")


def load_label_mask(path) -> LabelMask:
    levels, _ = _read_pgm(path)
    if (levels == 0).any():
        r, c = np.argwhere(levels == 0)[0]
        raise GridFormatError(f"{path}: label 0 at row {r}, col {c}; masks may only hold 1 and 2")
    try:
        return LabelMask(levels.astype(np.uint8), source_id=os.path.basename(str(path)))
    except ValueError as exc:
        raise GridFormatError(f"{path}: {exc}") from exc


def save_label_mask(mask: LabelMask, path) -> None:
    _write_pgm(path, mask.labels.astype(np.uint8), 255)


# ---------------------------------------------------------------------------
# transforms

def z_standardize_global(m: DepthMap) -> DepthMap:
    """Zero-mean, unit (population) standard deviation copy of ``m``."""
    v = m.values
    std = v.std()
    if not std > 0:
        raise DegenerateSurfaceError("cannot standardize a constant depth map (std = 0)")
    return DepthMap((v - v.mean()) / std, pixel_pitch=m.pixel_pitch, source_id=m.source_id)


def patch_origins(shape: Tuple[int, int], size: int, stride: int) -> List[Tuple[int, int]]:
    h, w = shape
    if size < 1 or stride < 1:
        raise ValueError("patch size and stride must be positive")
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds map dimensions {h}x{w}")
    return [(r, c) for r in range(0, h - size + 1, stride) for c in range(0, w - size + 1, stride)]


def extract_patches(m: DepthMap, size: int, stride: int) -> PatchSet:
    """Square patches at every ``(i*stride, j*stride)`` origin that fits, row-major."""
    v = m.values
    patches = [Patch((r, c), v[r:r + size, c:c + size]) for r, c in patch_origins(v.shape, size, stride)]
    return PatchSet(patches, size=size, stride=stride, source_id=m.source_id, source_shape=v.shape)


def patch_label(mask: LabelMask, p: Patch, threshold: float = 0.5) -> int:
    r, c = p.origin
    s = p.size
    h, w = mask.shape
    if r < 0 or c < 0 or r + s > h or c + s > w:
        raise ValueError(f"patch at {p.origin} of size {s} exceeds mask bounds {h}x{w}")
    frac = np.mean(mask.labels[r:r + s, c:c + s] == 1)
    return 1 if frac >= threshold else 2
