"""Synthetic surfaces: flat "natural" rock, pitted "engraved" rock, correlated noise."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid_io import DepthMap, LabelMask, z_standardize_global


@dataclass(frozen=True)
class SynthConfig:
    size: Tuple[int, int] = (256, 256)
    spacing_mean: float = 20.0
    spacing_jitter: float = 5.0
    pit_depth: float = 20.0
    pit_sigma: Optional[float] = None   # None -> spacing_mean / 6
    noise_rms: float = 1.0
    noise_corr_len: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if not self.spacing_mean > 2 * self.spacing_jitter >= 0:
            raise ValueError("need spacing_mean > 2 * spacing_jitter >= 0")
        if self.pit_sigma is not None and self.pit_sigma <= 0:
            raise ValueError("pit_sigma must be positive")
        if self.pit_depth < 0 or self.noise_rms < 0 or self.noise_corr_len < 0:
            raise ValueError("pit_depth, noise_rms and noise_corr_len must be non-negative")

    @property
    def sigma(self) -> float:
        return self.spacing_mean / 6.0 if self.pit_sigma is None else self.pit_sigma


ENGRAVED_I = dict(spacing_mean=20.0, spacing_jitter=5.0)
ENGRAVED_II = dict(spacing_mean=30.0, spacing_jitter=5.0)


def gen_flat(size) -> DepthMap:
    return DepthMap(np.zeros(tuple(size)))


def pit_centers(cfg: SynthConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Jittered pit grid as an ``(n, 2)`` array of ``(row, col)`` positions.

    The nominal grid is centered so both margins are equal; every center then
    moves by an independent uniform offset in ``[-jitter, jitter]`` per axis.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    axes = []
    for extent in cfg.size:
        count = max(1, int(extent // cfg.spacing_mean))
        first = (extent - (count - 1) * cfg.spacing_mean) / 2.0
        axes.append(first + cfg.spacing_mean * np.arange(count))
    rr, cc = np.meshgrid(axes[0], axes[1], indexing="ij")
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1)
    if cfg.spacing_jitter > 0:
        centers = centers + rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter, centers.shape)
    return centers


def pit_field(shape, centers: np.ndarray, depth: float, sigma: float) -> np.ndarray:
    h, w = shape
    out = np.zeros((h, w))
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    reach = int(np.ceil(6 * sigma))
    for cy, cx in centers:
        r0, r1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 2)
        c0, c1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 2)
        if r0 >= r1 or c0 >= c1:
            continue
        d2 = (rows[r0:r1] - cy) ** 2 + (cols[:, c0:c1] - cx) ** 2
        out[r0:r1, c0:c1] -= depth * np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def gen_engraved(cfg: SynthConfig) -> DepthMap:
    """Flat surface minus Gaussian pits on a jittered grid."""
    centers = pit_centers(cfg)
    return DepthMap(pit_field(cfg.size, centers, cfg.pit_depth, cfg.sigma))


def gen_noise_field(size, corr_len: float, rms: float, seed: int) -> DepthMap:
    """Zero-mean correlated Gaussian field with sample RMS ``rms``.

    White noise smoothed by a Gaussian of standard deviation ``corr_len``
    (periodic boundary), then centered and rescaled.
    """
    if corr_len < 0:
        raise ValueError("corr_len must be non-negative")
    rng = np.random.default_rng(seed)
    field = rng.standard_normal(tuple(size))
    if corr_len > 0:
        field = gaussian_filter(field, corr_len, mode="wrap")
    field = field - field.mean()
    cur = np.sqrt(np.mean(field * field))
    if cur > 0:
        field = field * (rms / cur)
    return DepthMap(field)


def compose(surface: DepthMap, noise: DepthMap) -> DepthMap:
    """Add noise to a surface and z-standardize the sum."""
    if surface.shape != noise.shape:
        raise ValueError(f"shape mismatch {surface.shape} vs {noise.shape}")
    return z_standardize_global(DepthMap(surface.values + noise.values, source_id=surface.source_id))


def engraved_mask(shape, centers: np.ndarray, radius: float) -> LabelMask:
    """Class 1 within ``radius`` of any pit center, class 2 elsewhere."""
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    inside = np.zeros((h, w), bool)
    for cy, cx in centers:
        inside |= (rows - cy) ** 2 + (cols - cx) ** 2 <= radius * radius
    return LabelMask(np.where(inside, 1, 2))


@dataclass
class SynthSurface:
    name: str
    kind: str              # natural | engraved_I | engraved_II
    depth: DepthMap
    mask: LabelMask


def surface_triple(cfg: SynthConfig) -> List[SynthSurface]:
    """Natural, engraved I and engraved II surfaces sharing one noise field."""
    rng = np.random.default_rng(cfg.seed)
    noise_seed = int(rng.integers(2 ** 63))
    noise = gen_noise_field(cfg.size, cfg.noise_corr_len, cfg.noise_rms, noise_seed)
    out = [SynthSurface("natural", "natural", compose(gen_flat(cfg.size), noise),
                        LabelMask(np.full(cfg.size, 2)))]
    for name, variant in (("engraved_I", ENGRAVED_I), ("engraved_II", ENGRAVED_II)):
        vcfg = replace(cfg, **variant)
        centers = pit_centers(vcfg, rng)
        pits = DepthMap(pit_field(cfg.size, centers, vcfg.pit_depth, vcfg.sigma))
        out.append(SynthSurface(name, name, compose(pits, noise),
                                engraved_mask(cfg.size, centers, vcfg.spacing_mean)))
    return out


def synthetic_dataset(cfg: SynthConfig, n_natural: int = 4, n_engraved_i: int = 1,
                      n_engraved_ii: int = 1, seed: int = 0, prefix: str = "") -> List[SynthSurface]:
    """Independent surfaces (each with its own noise realization) for one split."""
    rng = np.random.default_rng(seed)
    plan = ["natural"] * n_natural + ["engraved_I"] * n_engraved_i + ["engraved_II"] * n_engraved_ii
    out = []
    for i, kind in enumerate(plan):
        noise = gen_noise_field(cfg.size, cfg.noise_corr_len, cfg.noise_rms, int(rng.integers(2 ** 63)))
        name = f"{prefix}{kind}_{i:02d}"
        if kind == "natural":
            surf = compose(gen_flat(cfg.size), noise)
            mask = LabelMask(np.full(cfg.size, 2))
        else:
            vcfg = replace(cfg, **(ENGRAVED_I if kind == "engraved_I" else ENGRAVED_II))
            centers = pit_centers(vcfg, rng)
            surf = compose(DepthMap(pit_field(cfg.size, centers, vcfg.pit_depth, vcfg.sigma)), noise)
            mask = engraved_mask(cfg.size, centers, vcfg.spacing_mean)
        out.append(SynthSurface(name, kind, DepthMap(surf.values, source_id=name),
                                LabelMask(mask.labels, source_id=name)))
    return out
