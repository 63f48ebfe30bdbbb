"""Fixed-length descriptors of persistence diagrams: PD_AGG and persistence images."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

from .cubical import PersistenceDiagram

PD_AGG_NAMES = ("count", "min", "max", "mean", "std", "variance",
                "q1", "median", "q3", "sum_sqrt", "sum", "sum_sq")
WEIGHTINGS = ("none", "linear", "exponential")


@dataclass(frozen=True)
class PiParams:
    resolution: int = 16
    sigma_x: float = 0.001
    sigma_y: float = 0.001
    limits: Tuple[float, float] = (-5.0, 5.0)
    weighting: str = "none"
    outlier_removal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "limits", (float(self.limits[0]), float(self.limits[1])))
        if self.resolution < 2:
            raise ValueError("PI resolution must be at least 2")
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("PI sigmas must be positive")
        if not self.limits[1] > self.limits[0]:
            raise ValueError(f"PI limits must satisfy max > min, got {self.limits}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTINGS}")

    @property
    def length(self) -> int:
        return pi_length(self.resolution)

    def edges(self) -> np.ndarray:
        return np.linspace(self.limits[0], self.limits[1], self.resolution + 1)


@dataclass
class PersistenceImage:
    params: PiParams
    pixels: np.ndarray   # [birth index, death index]


@dataclass
class FeatureVector:
    values: np.ndarray
    provenance: Tuple[str, ...] = ()
    patch_id: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if isinstance(self.provenance, str):
            self.provenance = (self.provenance,)
        else:
            self.provenance = tuple(self.provenance)

    def __len__(self) -> int:
        return len(self.values)


def pi_length(resolution: int) -> int:
    return (resolution * resolution + resolution) // 2


def resolution_from_length(n: int) -> int:
    r = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if pi_length(r) != n:
        raise ValueError(f"{n} is not a triangular PI vector length")
    return r


def params_hash(obj) -> str:
    """Short stable hash of a JSON-serializable parameter description."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------------------
# PD_AGG

def pd_agg(d: PersistenceDiagram) -> np.ndarray:
    """The 12 aggregate statistics of interval lengths, in ``PD_AGG_NAMES`` order.

    Population standard deviation; quartiles interpolate linearly between
    order statistics.  An empty diagram maps to zeros.
    """
    lengths = np.sort(d.lengths)
    if lengths.size == 0:
        return np.zeros(len(PD_AGG_NAMES))
    std = lengths.std()
    q1, med, q3 = np.quantile(lengths, [0.25, 0.5, 0.75])
    return np.array([
        lengths.size, lengths[0], lengths[-1], lengths.mean(), std, std * std,
        q1, med, q3, np.sqrt(lengths).sum(), lengths.sum(), np.square(lengths).sum(),
    ], dtype=np.float64)


# ---------------------------------------------------------------------------
# persistence images

def remove_outliers(d: PersistenceDiagram, limits=None) -> PersistenceDiagram:
    """Drop intervals born below ``limits[0]`` or dying above ``limits[1]``."""
    lo, hi = d.limits if limits is None else limits
    keep = (d.births >= lo) & (d.deaths <= hi)
    return d._subset(keep)


def weight(b, e, scheme: str = "none", limits=(-5.0, 5.0)):
    """Per-point weight as a function of persistence ``e - b``.

    ``linear`` is ``(e - b) / L`` and ``exponential`` is
    ``(exp(p / tau) - 1) / (exp(L / tau) - 1)`` with ``tau = L / 4``, where
    ``L`` is the width of the diagram limits.
    """
    b = np.asarray(b, dtype=float)
    e = np.asarray(e, dtype=float)
    span = float(limits[1]) - float(limits[0])
    pers = e - b
    if scheme == "none":
        return np.ones_like(pers)
    if scheme == "linear":
        return pers / span
    if scheme == "exponential":
        tau = span / 4.0
        return np.expm1(pers / tau) / np.expm1(span / tau)
    raise ValueError(f"unknown weighting {scheme!r}")


def _axis_mass(edges: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian mass of each center in each bin, shape (n_points, n_bins)."""
    z = (edges[None, :] - centers[:, None]) / sigma
    lo, hi = z[:, :-1], z[:, 1:]
    # take the difference on the side of the tail that keeps precision
    upper = ndtr(-lo) - ndtr(-hi)
    lower = ndtr(hi) - ndtr(lo)
    return np.where(lo > 0, upper, lower)


def persistence_image(d: PersistenceDiagram, params: PiParams = PiParams()) -> PersistenceImage:
    """Box integrals of a weighted sum of axis-aligned Gaussians on the PI grid.

    ``pixels[i, j]`` covers birth bin ``i`` and death bin ``j``.
    """
    if params.outlier_removal:
        d = remove_outliers(d, params.limits)
    r = params.resolution
    if len(d) == 0:
        return PersistenceImage(params, np.zeros((r, r)))
    edges = params.edges()
    w = weight(d.births, d.deaths, params.weighting, params.limits)
    mx = _axis_mass(edges, d.births, params.sigma_x)
    my = _axis_mass(edges, d.deaths, params.sigma_y)
    pixels = np.einsum("n,ni,nj->ij", w, mx, my)
    if not np.all(np.isfinite(pixels)):
        raise FloatingPointError("non-finite persistence image accumulation")
    return PersistenceImage(params, pixels)


def triangle_mask(resolution: int) -> np.ndarray:
    i, j = np.indices((resolution, resolution))
    return j >= i


def vectorize_pi(img) -> np.ndarray:
    """Row-major pixels on and above the diagonal, length ``(R^2 + R) / 2``."""
    pixels = img.pixels if isinstance(img, PersistenceImage) else np.asarray(img)
    return pixels[triangle_mask(pixels.shape[0])]


def unvectorize_pi(vec: Sequence[float]) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    r = resolution_from_length(len(vec))
    out = np.zeros((r, r))
    out[triangle_mask(r)] = vec
    return out


def concat_features(vs: Iterable[FeatureVector]) -> FeatureVector:
    """Early fusion: concatenate vectors of the same patch in argument order."""
    vs = list(vs)
    if not vs:
        return FeatureVector(np.zeros(0))
    ids = {v.patch_id for v in vs if v.patch_id is not None}
    if len(ids) > 1:
        raise ValueError(f"cannot concatenate features of different patches: {sorted(map(str, ids))}")
    tags: List[str] = []
    for v in vs:
        tags.extend(v.provenance)
    return FeatureVector(np.concatenate([v.values for v in vs]), tuple(tags),
                         patch_id=ids.pop() if ids else None)
