"""Per-patch transforms applied before topological analysis.

Local normalizations, the Schmid and Maximum Response (MR) filter banks and
completed LBP sign/magnitude maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Tuple

import numpy as np
from scipy.signal import fftconvolve

from .grid_io import Patch

NORMALIZATIONS = ("zstd", "minmax", "pstd")
SCHMID_PARAMS = ((2, 1), (4, 1), (4, 2), (6, 1), (6, 2), (6, 3), (8, 1), (8, 2),
                 (8, 3), (10, 1), (10, 2), (10, 3), (10, 4))
MR_SCALES = ((1, 3), (2, 6), (4, 12))
MR_ORIENTATIONS = 6


class DegeneratePatchError(ValueError):
    pass


def _values(p) -> np.ndarray:
    return np.asarray(p.values if isinstance(p, Patch) else p, dtype=np.float64)


def _like(p, values):
    return Patch(p.origin, values) if isinstance(p, Patch) else values


def local_normalize(p, scheme: str):
    """Normalize one patch: ``zstd``, ``minmax`` or ``pstd`` (median / MAD)."""
    v = _values(p)
    if scheme == "zstd":
        center, scale = v.mean(), v.std()
    elif scheme == "minmax":
        center, scale = v.min(), v.max() - v.min()
    elif scheme == "pstd":
        center = np.median(v)
        scale = np.median(np.abs(v - center))
    else:
        raise ValueError(f"unknown normalization {scheme!r}; expected one of {NORMALIZATIONS}")
    if not scale > 0:
        raise DegeneratePatchError(f"{scheme} normalization of a patch with zero spread")
    return _like(p, (v - center) / scale)


# ---------------------------------------------------------------------------
# filter banks

@dataclass(frozen=True)
class FilterBank:
    kind: str
    kernels: np.ndarray              # (n, K, K)
    meta: Tuple[Dict, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.kernels)

    @property
    def n_channels(self) -> int:
        return 8 if self.kind == "mr" else len(self.kernels)


def _zero_mean_l1(k: np.ndarray) -> np.ndarray:
    k = k - k.mean()
    return k / np.abs(k).sum()


def schmid_bank(size: int = 49, halve_tau: bool = True) -> FilterBank:
    """13 isotropic Schmid kernels ``cos(pi*tau*r/sigma) * exp(-r^2 / (2 sigma^2))``.

    With ``halve_tau`` every tau of the standard parameter set is halved.
    """
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    r = np.hypot(x, y)
    kernels, meta = [], []
    for sigma, tau in SCHMID_PARAMS:
        t = tau / 2 if halve_tau else tau
        k = np.cos(np.pi * t * r / sigma) * np.exp(-r * r / (2.0 * sigma * sigma))
        kernels.append(_zero_mean_l1(k))
        meta.append({"sigma": sigma, "tau": t})
    return FilterBank("schmid", np.array(kernels), tuple(meta))


def _gauss1d(x, sigma, order):
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    if order == 1:
        g = -x * g
    elif order == 2:
        g = (x * x - sigma * sigma) * g
    return g


def mr_bank(size: int = 49) -> FilterBank:
    """38 kernels: edge and bar filters at 3 scales x 6 orientations, Gaussian, LoG.

    Oriented kernels are Gaussian derivatives (order 1 for edges, order 2 for
    bars) across the short axis ``sigma_x`` and smooth along ``sigma_y``.
    Support is the disk inscribed in the ``size x size`` window so that a
    rotated kernel stays inside it.  Every kernel except the Gaussian is zero
    mean on that disk.  The six orientations of one (kind, scale) group share
    a single L1 normalizer: at the finest scale the sampled L1 norm depends on
    the angle to the pixel grid and per-kernel scaling would give the
    orientations different gains.
    """
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
    r2 = x * x + y * y
    disk = r2 <= half * half

    def zero_mean(k):
        return np.where(disk, k - k[disk].mean(), 0.0)

    kernels, meta = [], []
    for kind, order in (("edge", 1), ("bar", 2)):
        for sx, sy in MR_SCALES:
            group = []
            for o in range(MR_ORIENTATIONS):
                theta = np.pi * o / MR_ORIENTATIONS
                c, s = np.cos(theta), np.sin(theta)
                u = c * x + s * y
                v = -s * x + c * y
                group.append(zero_mean(_gauss1d(u, sx, order) * _gauss1d(v, sy, 0)))
                meta.append({"kind": kind, "sigma_x": sx, "sigma_y": sy, "theta": theta})
            norm = np.mean([np.abs(k).sum() for k in group])
            kernels.extend(k / norm for k in group)
    g = np.where(disk, np.exp(-r2 / (2.0 * 10.0 ** 2)), 0.0)
    kernels.append(g / g.sum())
    meta.append({"kind": "gaussian", "sigma": 10})
    log = zero_mean((r2 - 2.0 * 10.0 ** 2) * g)
    kernels.append(log / np.abs(log).sum())
    meta.append({"kind": "log", "sigma": 10})
    return FilterBank("mr", np.array(kernels), tuple(meta))


def convolve_mirror(values: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Same-size convolution with symmetric (mirror) boundary padding.

    ``kernels`` is one ``K x K`` kernel or a stack ``(n, K, K)``.
    """
    kernels = np.asarray(kernels, dtype=float)
    single = kernels.ndim == 2
    if single:
        kernels = kernels[None]
    half = kernels.shape[-1] // 2
    padded = np.pad(values, half, mode="symmetric")
    out = fftconvolve(padded[None], kernels, mode="valid", axes=(1, 2))
    return out[0] if single else out


def apply_bank(p, bank: FilterBank) -> list:
    """Filter a patch with every kernel; MR banks collapse to 8 channels."""
    v = _values(p)
    half = bank.kernels.shape[-1] // 2
    if half > v.shape[0] or half > v.shape[1]:
        raise ValueError(f"kernel radius {half} exceeds patch size {v.shape}")
    responses = convolve_mirror(v, bank.kernels)
    if bank.kind == "mr":
        responses = _mr_collapse(responses)
    return [_like(p, r) for r in responses]


def _mr_collapse(responses: np.ndarray) -> np.ndarray:
    n_or = MR_ORIENTATIONS
    oriented = responses[:-2].reshape(2 * len(MR_SCALES), n_or, *responses.shape[1:])
    n_edge = len(MR_SCALES)
    # odd (edge) kernels flip sign under a 180 degree turn, so their max is over magnitudes
    edge = np.abs(oriented[:n_edge]).max(axis=1)
    bar = oriented[n_edge:].max(axis=1)
    return np.concatenate([edge, bar, responses[-2:]], axis=0)


def apply_mr(p, bank: FilterBank = None) -> list:
    return apply_bank(p, bank or _default_mr())


@lru_cache(maxsize=None)
def _default_mr() -> FilterBank:
    return mr_bank()


@lru_cache(maxsize=None)
def _default_schmid() -> FilterBank:
    return schmid_bank()


# ---------------------------------------------------------------------------
# CLBP

@dataclass
class ClbpMaps:
    s_map: np.ndarray
    m_map: np.ndarray
    n: int
    r: int
    encoding: str

    @property
    def n_codes(self) -> int:
        return clbp_code_count(self.n, self.encoding)


def _rotations_min(codes: np.ndarray, n: int) -> np.ndarray:
    mask = (1 << n) - 1
    best = codes.copy()
    cur = codes.copy()
    for _ in range(n - 1):
        cur = ((cur >> 1) | ((cur & 1) << (n - 1))) & mask
        best = np.minimum(best, cur)
    return best


@lru_cache(maxsize=None)
def _code_table(n: int, encoding: str) -> np.ndarray:
    codes = np.arange(1 << n, dtype=np.int64)
    if encoding == "ri":
        canon = _rotations_min(codes, n)
        _, table = np.unique(canon, return_inverse=True)
        return table.astype(np.int64)
    if encoding == "riu2":
        bits = (codes[:, None] >> np.arange(n)) & 1
        ones = bits.sum(axis=1)
        transitions = np.sum(bits != np.roll(bits, 1, axis=1), axis=1)
        return np.where(transitions <= 2, ones, n + 1).astype(np.int64)
    raise ValueError(f"unknown CLBP encoding {encoding!r}")


def clbp_code_count(n: int, encoding: str) -> int:
    return int(_code_table(n, encoding).max()) + 1


def _sample_offsets(n: int, r: float):
    angles = 2 * np.pi * np.arange(n) / n
    dy = -r * np.sin(angles)
    dx = r * np.cos(angles)
    # snap values that are integers up to rounding noise
    dy = np.where(np.abs(dy - np.round(dy)) < 1e-6, np.round(dy), dy)
    dx = np.where(np.abs(dx - np.round(dx)) < 1e-6, np.round(dx), dx)
    return dy, dx


def _sample(v: np.ndarray, rows: np.ndarray, cols: np.ndarray, dy: float, dx: float,
            interpolation: str) -> np.ndarray:
    y = rows + dy
    x = cols + dx
    if interpolation == "nearest":
        return v[np.rint(y).astype(int), np.rint(x).astype(int)]
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    ty = y - y0
    tx = x - x0
    y1 = np.minimum(y0 + 1, v.shape[0] - 1)
    x1 = np.minimum(x0 + 1, v.shape[1] - 1)
    a, b = v[y0, x0], v[y0, x1]
    c, d = v[y1, x0], v[y1, x1]
    # a + t*(b - a) form keeps constant neighbourhoods exact
    top = a + tx * (b - a)
    bottom = c + tx * (d - c)
    return top + ty * (bottom - top)


def clbp(p, n: int = 8, r: int = 3, encoding: str = "riu2",
         interpolation: str = "bilinear") -> ClbpMaps:
    """CLBP_S and CLBP_M code maps of a patch.

    Sign bits are ``neighbour - center >= 0``; magnitude bits compare
    ``|neighbour - center|`` against the mean absolute difference over the
    patch interior.  Both bit patterns go through the same rotation-invariant
    encoding.  A border of width ``r`` is filled with code 0.
    """
    if n not in (8, 16) or r not in (3, 5):
        raise ValueError("CLBP supports n in {8, 16} and r in {3, 5}")
    v = _values(p)
    h, w = v.shape
    if min(h, w) <= 2 * r:
        raise ValueError(f"patch {h}x{w} too small for CLBP radius {r}")
    rows, cols = np.mgrid[r:h - r, r:w - r]
    center = v[r:h - r, r:w - r]
    dy, dx = _sample_offsets(n, r)
    diffs = np.stack([_sample(v, rows, cols, dy[k], dx[k], interpolation) - center for k in range(n)])
    weights = (1 << np.arange(n, dtype=np.int64))[:, None, None]
    s_bits = (diffs >= 0).astype(np.int64)
    mag = np.abs(diffs)
    m_bits = (mag >= mag.mean()).astype(np.int64)
    table = _code_table(n, encoding)
    s_map = np.zeros((h, w), dtype=np.int64)
    m_map = np.zeros((h, w), dtype=np.int64)
    s_map[r:h - r, r:w - r] = table[(s_bits * weights).sum(axis=0)]
    m_map[r:h - r, r:w - r] = table[(m_bits * weights).sum(axis=0)]
    return ClbpMaps(s_map, m_map, n, r, encoding)


# ---------------------------------------------------------------------------

PREFILTER_MODES = ("none", "schmid", "mr", "clbp")


def prefilter_channels(values: np.ndarray, mode: str = "none", clbp_n: int = 8, clbp_r: int = 3,
                       clbp_encoding: str = "riu2") -> List[np.ndarray]:
    """Channels fed to the topological pipeline for one patch."""
    if mode == "none":
        return [np.asarray(values, dtype=float)]
    if mode == "schmid":
        return apply_bank(values, _default_schmid())
    if mode == "mr":
        return apply_bank(values, _default_mr())
    if mode == "clbp":
        maps = clbp(values, clbp_n, clbp_r, clbp_encoding)
        return [maps.s_map.astype(float), maps.m_map.astype(float)]
    raise ValueError(f"unknown prefilter mode {mode!r}; expected one of {PREFILTER_MODES}")


def n_channels(mode: str) -> int:
    return {"none": 1, "schmid": len(SCHMID_PARAMS), "mr": 8, "clbp": 2}[mode]


def dump_bank(bank: FilterBank, directory) -> List[str]:
    """Write one CSV per kernel; returns the written paths."""
    import os
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, k in enumerate(bank.kernels):
        path = os.path.join(directory, f"{bank.kind}_{i:02d}.csv")
        np.savetxt(path, k, delimiter=",", fmt="%.17g")
        paths.append(path)
    return paths
