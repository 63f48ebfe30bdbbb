"""Per-patch feature extraction and the feature-matrix CSV format.

Pipeline for one patch: optional local normalization, optional pre-filtering
into channels, one persistence diagram per channel (restricted to the
configured homology degrees), then PI and/or PD_AGG per channel,
concatenated in channel order.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import FeatureConfig, from_dict, to_dict
from .cubical import patch_diagram
from .descriptors import PD_AGG_NAMES, params_hash, pd_agg, persistence_image, vectorize_pi
from .grid_io import DepthMap, LabelMask, extract_patches, patch_label, patch_origins, z_standardize_global
from .learn import FeatureMatrix
from .prefilter import local_normalize, n_channels, prefilter_channels

CSV_MAGIC = "# topotex-features v1"
_PI_COL = re.compile(r"^c(\d+)_pi_(\d+)_(\d+)$")


def column_names(cfg: FeatureConfig) -> Tuple[str, ...]:
    r = cfg.pi.resolution
    pi_cols = [(i, j) for i in range(r) for j in range(i, r)]
    out = []
    for c in range(n_channels(cfg.prefilter)):
        if cfg.descriptor in ("pi", "pi+pd_agg"):
            out += [f"c{c}_pi_{i}_{j}" for i, j in pi_cols]
        if cfg.descriptor in ("pd_agg", "pi+pd_agg"):
            out += [f"c{c}_agg_{name}" for name in PD_AGG_NAMES]
    return tuple(out)


def pi_columns(columns: Sequence[str], channel: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column indices of one channel's PI entries with their (birth, death) pixel indices."""
    cols, ii, jj = [], [], []
    for k, name in enumerate(columns):
        m = _PI_COL.match(name)
        if m and int(m.group(1)) == channel:
            cols.append(k)
            ii.append(int(m.group(2)))
            jj.append(int(m.group(3)))
    if not cols:
        raise ValueError(f"no persistence-image columns for channel {channel}")
    return np.array(cols), np.array(ii), np.array(jj)


def feature_hash(cfg: FeatureConfig) -> str:
    return params_hash(to_dict(cfg))


def channel_limits(cfg: FeatureConfig) -> List[Tuple[float, float]]:
    k = n_channels(cfg.prefilter)
    if cfg.prefilter == "none":
        return [cfg.pi.limits]
    if cfg.channel_limits is None:
        raise ValueError("filtered channels need fitted limits; call fit_channel_limits first")
    if len(cfg.channel_limits) != k:
        raise ValueError(f"{cfg.prefilter} gives {k} channels but {len(cfg.channel_limits)} limits are set")
    return list(cfg.channel_limits)


def _channels(values: np.ndarray, cfg: FeatureConfig) -> List[np.ndarray]:
    if cfg.local_norm != "none":
        values = local_normalize(values, cfg.local_norm)
    return prefilter_channels(values, cfg.prefilter, cfg.clbp.n, cfg.clbp.r, cfg.clbp.encoding)


def fit_channel_limits(maps: Sequence[DepthMap], cfg: FeatureConfig, width: float = 5.0) -> FeatureConfig:
    """Set per-channel limits to mean +- ``width`` std of training channel values.

    Statistics come from non-overlapping patches (stride = patch size) of the
    given maps.  Raw channels keep the PI limits and return ``cfg`` unchanged.
    """
    if cfg.prefilter == "none":
        return cfg
    k = n_channels(cfg.prefilter)
    s1, s2, cnt = np.zeros(k), np.zeros(k), 0
    for m in maps:
        for p in extract_patches(m, cfg.patch_size, cfg.patch_size):
            for c, ch in enumerate(_channels(p.values, cfg)):
                s1[c] += ch.sum()
                s2[c] += np.square(ch).sum()
            cnt += p.values.size
    mean = s1 / cnt
    std = np.sqrt(np.maximum(s2 / cnt - mean * mean, 0.0))
    std = np.where(std > 0, std, 1.0)
    lims = tuple((float(mu - width * sd), float(mu + width * sd)) for mu, sd in zip(mean, std))
    return replace(cfg, channel_limits=lims)


def patch_diagrams(values: np.ndarray, cfg: FeatureConfig) -> list:
    """Per-channel diagrams of one patch, restricted to the configured degrees."""
    out = []
    for ch, lim in zip(_channels(values, cfg), channel_limits(cfg)):
        d = patch_diagram(ch, cfg.essential_policy, lim)
        out.append(d.select_degrees(cfg.degrees))
    return out


def describe(diagrams: list, cfg: FeatureConfig) -> np.ndarray:
    parts = []
    for d, lim in zip(diagrams, channel_limits(cfg)):
        if cfg.descriptor in ("pi", "pi+pd_agg"):
            parts.append(vectorize_pi(persistence_image(d, replace(cfg.pi, limits=lim))))
        if cfg.descriptor in ("pd_agg", "pi+pd_agg"):
            parts.append(pd_agg(d))
    return np.concatenate(parts)


def patch_features(values: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    return describe(patch_diagrams(values, cfg), cfg)


@dataclass
class MapFeatures:
    """Features of all patches of one depth map."""

    source_id: str
    shape: Tuple[int, int]
    patch_size: int
    stride: int
    origins: np.ndarray          # (n, 2)
    X: np.ndarray                # (n, n_features)
    labels: Optional[np.ndarray] = None
    mask_path: str = ""


def extract_map(m: DepthMap, cfg: FeatureConfig, mask: Optional[LabelMask] = None,
                standardize: bool = True) -> MapFeatures:
    if mask is not None and mask.shape != m.shape:
        raise ValueError(f"mask shape {mask.shape} does not match depth map {m.shape}")
    src = z_standardize_global(m) if standardize else m
    ps = extract_patches(src, cfg.patch_size, cfg.stride)
    rows, labels = [], []
    for p in ps:
        try:
            rows.append(patch_features(p.values, cfg))
        except ValueError as exc:
            raise ValueError(f"{m.source_id or 'map'} patch at {p.origin}: {exc}") from exc
        if mask is not None:
            labels.append(patch_label(mask, p, cfg.label_threshold))
    return MapFeatures(m.source_id, m.shape, cfg.patch_size, cfg.stride,
                       np.array([p.origin for p in ps], dtype=np.int64).reshape(-1, 2),
                       np.array(rows), None if mask is None else np.array(labels, dtype=np.int64))


@dataclass
class FeatureTable:
    cfg: FeatureConfig
    maps: List[MapFeatures]
    columns: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.columns:
            self.columns = column_names(self.cfg)

    @property
    def hash(self) -> str:
        return feature_hash(self.cfg)

    @property
    def labeled(self) -> bool:
        return all(m.labels is not None for m in self.maps)

    def matrix(self) -> FeatureMatrix:
        if not self.labeled:
            raise ValueError("feature table has unlabeled maps")
        X = np.vstack([m.X for m in self.maps])
        y = np.concatenate([m.labels for m in self.maps])
        groups = np.concatenate([np.full(len(m.X), i) for i, m in enumerate(self.maps)])
        return FeatureMatrix(X, y, self.columns, {"feature_hash": self.hash}, groups)

    def with_columns(self, extra: "ExternalFeatures") -> "FeatureTable":
        """Append external per-patch features after the topological ones."""
        maps = []
        for m in self.maps:
            add = np.array([extra.lookup(m.source_id, tuple(o)) for o in m.origins]).reshape(len(m.X), -1)
            maps.append(replace(m, X=np.hstack([m.X, add])))
        return FeatureTable(self.cfg, maps, self.columns + tuple(extra.columns))


def extract_table(items: Sequence[Tuple[DepthMap, Optional[LabelMask]]], cfg: FeatureConfig,
                  mask_paths: Sequence[str] = ()) -> FeatureTable:
    maps = []
    for k, (m, mask) in enumerate(items):
        mf = extract_map(m, cfg, mask)
        if k < len(mask_paths):
            mf.mask_path = mask_paths[k] or ""
        maps.append(mf)
    return FeatureTable(cfg, maps)


# ---------------------------------------------------------------------------
# CSV

def write_table(t: FeatureTable, path) -> None:
    """Comment header (descriptor, params hash, config, sources), a column row, then data rows.

    Each data row holds the features of one patch followed by its class label
    (0 when the map had no mask).
    """
    with open(path, "w", newline="") as fh:
        fh.write(CSV_MAGIC + "\n")
        fh.write(f"# descriptor: {t.cfg.descriptor}\n")
        fh.write(f"# params_hash: {t.hash}\n")
        fh.write(f"# config: {json.dumps(to_dict(t.cfg), sort_keys=True)}\n")
        for m in t.maps:
            fh.write(f"# source: {json.dumps(dict(name=m.source_id, height=m.shape[0], width=m.shape[1], patch=m.patch_size, stride=m.stride, rows=len(m.X), mask=m.mask_path))}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(t.columns) + ["label"])
        for m in t.maps:
            lab = m.labels if m.labels is not None else np.zeros(len(m.X), dtype=np.int64)
            for row, y in zip(m.X, lab):
                w.writerow([format(float(v), ".17g") for v in row] + [int(y)])


def read_table(path) -> FeatureTable:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CSV_MAGIC:
        raise ValueError(f"{path}: not a topotex feature CSV")
    meta, sources, k = {}, [], 1
    while k < len(lines) and lines[k].startswith("#"):
        key, _, val = lines[k][2:].partition(": ")
        if key == "source":
            sources.append(json.loads(val))
        else:
            meta[key] = val
        k += 1
    cfg = from_dict(FeatureConfig, json.loads(meta["config"]))
    if feature_hash(cfg) != meta.get("params_hash"):
        raise ValueError(f"{path}: params hash does not match the embedded config")
    columns = next(csv.reader([lines[k]]))[:-1]
    data = [next(csv.reader([ln])) for ln in lines[k + 1:] if ln.strip()]
    arr = np.array(data, dtype=np.float64).reshape(len(data), len(columns) + 1)
    maps, start = [], 0
    for s in sources:
        block = arr[start:start + s["rows"]]
        start += s["rows"]
        origins = np.array(patch_origins((s["height"], s["width"]), s["patch"], s["stride"]),
                           dtype=np.int64).reshape(-1, 2)
        labels = block[:, -1].astype(np.int64)
        maps.append(MapFeatures(s["name"], (s["height"], s["width"]), s["patch"], s["stride"], origins,
                                block[:, :-1], None if np.all(labels == 0) else labels, s.get("mask", "")))
    if start != len(arr):
        raise ValueError(f"{path}: {len(arr)} data rows but sources declare {start}")
    return FeatureTable(cfg, maps, tuple(columns))


@dataclass
class ExternalFeatures:
    """Extra per-patch descriptors keyed by (source, row, col)."""

    columns: Tuple[str, ...]
    table: Dict[Tuple[str, int, int], np.ndarray] = field(default_factory=dict)

    def lookup(self, source: str, origin: Tuple[int, int]) -> np.ndarray:
        key = (source, int(origin[0]), int(origin[1]))
        if key not in self.table:
            raise KeyError(f"external features lack patch {key}")
        return self.table[key]


def read_external(path) -> ExternalFeatures:
    """CSV with header ``source,row,col,<feature columns...>``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    if head[:3] != ["source", "row", "col"]:
        raise ValueError(f"{path}: header must start with source,row,col")
    out = ExternalFeatures(tuple(f"ext_{c}" for c in head[3:]))
    for k, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        try:
            vals = np.array([float(x) for x in r[3:]])
        except ValueError as exc:
            raise ValueError(f"{path}: line {k}: {exc}") from exc
        if len(vals) != len(head) - 3 or not np.all(np.isfinite(vals)):
            raise ValueError(f"{path}: line {k}: expected {len(head) - 3} finite values")
        out.table[(r[0], int(r[1]), int(r[2]))] = vals
    return out
