"""DSC, the repeated evaluation protocol, stability analyses and discriminativity maps."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.model_selection import StratifiedKFold

from .config import FeatureConfig, ProtocolConfig, derive_seed, to_dict
from .descriptors import PiParams, persistence_image, vectorize_pi
from .features import FeatureTable, MapFeatures, channel_limits, fit_channel_limits, pi_columns
from .grid_io import DepthMap, LabelMask
from .cubical import patch_diagram
from .learn import (BoostModel, BoostParams, FeatureMatrix, FeatureRanking, combined_ranking,
                    fisher_scores, gini_importance, random_ranking, rusboost_train, select_features)
from .prefilter import prefilter_channels


# ---------------------------------------------------------------------------
# metrics

def _class1(x) -> np.ndarray:
    v = x.labels if isinstance(x, LabelMask) else np.asarray(x)
    return v == 1


def dice_counts(pred, truth) -> Tuple[int, int, int]:
    """(|X ∩ Y|, |X|, |Y|) over class-1 pixels."""
    a, b = _class1(pred), _class1(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return int(np.sum(a & b)), int(a.sum()), int(b.sum())


def dsc_from_counts(inter: int, na: int, nb: int) -> float:
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def dsc(pred, truth) -> float:
    """Dice overlap of the class-1 pixels; two empty sets count as perfect agreement."""
    return dsc_from_counts(*dice_counts(pred, truth))


def pooled_dsc(pairs: Sequence[Tuple[object, object]]) -> float:
    """DSC over the union of several (prediction, truth) maps."""
    tot = np.zeros(3, dtype=np.int64)
    for p, t in pairs:
        tot += dice_counts(p, t)
    return dsc_from_counts(*tot)


def normalized_difference(a, b) -> float:
    """``sum|a - b| / sum(|a| + |b|)``; 0 when both are all-zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    den = np.abs(a).sum() + np.abs(b).sum()
    if den == 0:
        return 0.0
    return float(np.abs(a - b).sum() / den)


def rasterize(shape: Tuple[int, int], origins: np.ndarray, size: int, labels: np.ndarray) -> LabelMask:
    """Pixel labels by majority vote of all covering patches.

    Ties go to class 1; pixels no patch covers get class 2.
    """
    h, w = shape
    votes = np.zeros((2, h + 1, w + 1), dtype=np.int64)
    for (r, c), lab in zip(np.asarray(origins).reshape(-1, 2), np.asarray(labels)):
        k = 0 if lab == 1 else 1
        votes[k, r, c] += 1
        votes[k, r + size, c] -= 1
        votes[k, r, c + size] -= 1
        votes[k, r + size, c + size] += 1
    cover = votes.cumsum(axis=1).cumsum(axis=2)[:, :h, :w]
    one = (cover[0] >= cover[1]) & (cover[0] + cover[1] > 0)
    return LabelMask(np.where(one, 1, 2))


# ---------------------------------------------------------------------------
# protocol

class EvaluationSet:
    """Held-out maps whose ground truth is only reachable through ``reveal_truth``.

    The protocol calls ``reveal_truth`` once per repetition, after the final
    model has predicted every test patch; ``truth_reads`` counts the calls.
    """

    def __init__(self, maps: Sequence[MapFeatures], truths: Sequence[LabelMask]):
        if len(maps) != len(truths):
            raise ValueError("one truth mask per test map is required")
        for m, t in zip(maps, truths):
            if tuple(t.shape) != tuple(m.shape):
                raise ValueError(f"truth of {m.source_id} has shape {t.shape}, map has {m.shape}")
        self.maps = [replace(m, labels=None) for m in maps]
        self.__truths = list(truths)
        self.truth_reads = 0

    @classmethod
    def from_table(cls, t: FeatureTable, truths: Optional[Sequence[LabelMask]] = None) -> "EvaluationSet":
        """Truth masks default to the rasterized patch labels of ``t``."""
        if truths is None:
            truths = [rasterize(m.shape, m.origins, m.patch_size, m.labels) for m in t.maps]
        return cls(t.maps, truths)

    @property
    def n_features(self) -> int:
        return self.maps[0].X.shape[1]

    def reveal_truth(self) -> List[LabelMask]:
        self.truth_reads += 1
        return list(self.__truths)

    def predict_masks(self, predict_fn) -> List[LabelMask]:
        return [rasterize(m.shape, m.origins, m.patch_size, predict_fn(m.X)) for m in self.maps]


@dataclass
class ProtocolReport:
    dsc: np.ndarray
    seeds: List[int]
    chosen: List[Tuple[int, int]]          # (max_depth, rounds) per repetition
    config: dict = field(default_factory=dict)
    baseline_dsc: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.dsc))

    @property
    def std(self) -> float:
        return float(np.std(self.dsc))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["repetition", "seed", "max_depth", "rounds", "dsc"])
        for i, (s, (d, t), v) in enumerate(zip(self.seeds, self.chosen, self.dsc)):
            w.writerow([i, s, d, t, format(float(v), ".17g")])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"mean_dsc": self.mean, "std_dsc": self.std, "repetitions": len(self.dsc),
                "baseline_dsc_all_class2": self.baseline_dsc, "config": self.config}


def _stratified_subset(y: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1:
        return np.arange(len(y))
    out = []
    for c in (1, 2):
        idx = np.flatnonzero(y == c)
        k = max(1, int(round(fraction * len(idx))))
        out.append(rng.choice(idx, size=min(k, len(idx)), replace=False))
    return np.sort(np.concatenate(out))


def _rank(X: FeatureMatrix, method: str, seed: int, learner: BoostParams) -> FeatureRanking:
    if method == "fisher":
        return fisher_scores(X)
    if method == "random":
        return random_ranking(X.n_cols, seed)
    gini = gini_importance(rusboost_train(X, learner, seed))
    if method == "gini":
        return gini
    return combined_ranking(gini, fisher_scores(X))


def _cv_score(X: FeatureMatrix, depth: int, rounds: Sequence[int], folds: int, seed: int) -> Dict[int, float]:
    """Patch-level DSC pooled over CV folds for every staged round count."""
    n_folds = min(folds, int(np.bincount(X.y)[1:].min()))
    if n_folds < 2:
        raise ValueError("too few minority rows for cross-validation")
    skf = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed % (2 ** 32))
    tot = {t: np.zeros(3, dtype=np.int64) for t in rounds}
    for k, (tr, va) in enumerate(skf.split(X.X, X.y)):
        model = rusboost_train(X.rows(tr), BoostParams(max(rounds), depth), derive_seed(seed, "fold", k))
        staged = model.staged_margins(X.X[va], rounds)
        for t in rounds:
            pred = np.where(staged[t] >= 0, 1, 2)
            tot[t] += dice_counts(pred, X.y[va])
    return {t: dsc_from_counts(*tot[t]) for t in rounds}


def run_protocol(train: FeatureMatrix, test: EvaluationSet, config: ProtocolConfig = ProtocolConfig(),
                 master_seed: int = 0) -> ProtocolReport:
    """Repeated subset / cross-validate / refit / score protocol.

    Each repetition draws a class-stratified random subset of the training
    rows, selects tree depth and round count by stratified k-fold CV on that
    subset (patch-level DSC), refits on the whole subset and scores the
    held-out maps by pooled pixel DSC after majority-vote rasterization.
    Optional feature selection is fitted on the subset only.
    """
    if train.n_cols != test.n_features:
        raise ValueError(f"train has {train.n_cols} features, test has {test.n_features}")
    scores, seeds, chosen = [], [], []
    for rep in range(config.repetitions):
        seed = derive_seed(master_seed, "repetition", rep)
        rng = np.random.default_rng(seed)
        sub = train.rows(_stratified_subset(train.y, config.subset_fraction, rng))
        cols = np.arange(train.n_cols)
        if config.selection is not None and config.selection.pct < 100:
            sel = config.selection
            ranking = _rank(sub, sel.method, derive_seed(seed, "selection"),
                            BoostParams(max(config.rounds_grid), max(config.depth_grid)))
            cols = np.sort(select_features(ranking, sel.pct))
            sub = sub.cols(cols)
        best = None
        for depth in config.depth_grid:
            cv = _cv_score(sub, depth, config.rounds_grid, config.folds, derive_seed(seed, "cv", depth))
            for t in config.rounds_grid:
                if best is None or cv[t] > best[0]:
                    best = (cv[t], depth, t)
        _, depth, rounds = best
        model = rusboost_train(sub, BoostParams(rounds, depth), derive_seed(seed, "final"))
        preds = test.predict_masks(lambda X: model.predict_labels(X[:, cols]))
        truths = test.reveal_truth()
        scores.append(pooled_dsc(list(zip(preds, truths))))
        seeds.append(seed)
        chosen.append((depth, rounds))
    truths = test.reveal_truth()
    baseline = pooled_dsc([(np.full(t.shape, 2), t) for t in truths])
    return ProtocolReport(np.array(scores), seeds, chosen,
                          {"protocol": to_dict(config), "master_seed": master_seed}, baseline)


# ---------------------------------------------------------------------------
# stability

@dataclass
class StabilityReport:
    key: str                                  # "snr" or "offset"
    mode: str
    rows: List[Tuple[int, float, float, float]] = field(default_factory=list)  # patch, level, d_patch, d_pi

    def levels(self) -> List[float]:
        return sorted({r[1] for r in self.rows})

    def mean_pi_difference(self, level) -> float:
        return float(np.mean([r[3] for r in self.rows if r[1] == level]))

    def mean_patch_difference(self, level) -> float:
        return float(np.mean([r[2] for r in self.rows if r[1] == level]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "patch", self.key, "d_patch", "d_pi"])
        for p, lev, dp, di in self.rows:
            w.writerow([self.mode, p, format(lev, "g"), format(dp, ".17g"), format(di, ".17g")])
        return buf.getvalue()


def _pi_vector(values: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    parts = []
    chans = prefilter_channels(values, cfg.prefilter, cfg.clbp.n, cfg.clbp.r, cfg.clbp.encoding)
    for ch, lim in zip(chans, channel_limits(cfg)):
        d = patch_diagram(ch, cfg.essential_policy, lim).select_degrees(cfg.degrees)
        parts.append(vectorize_pi(persistence_image(d, replace(cfg.pi, limits=lim))))
    return np.concatenate(parts)


def _stability_cfg(pi_params: PiParams, prefilter_mode: str, maps: Sequence[DepthMap],
                   patch_size: int, base: Optional[FeatureConfig]) -> FeatureConfig:
    cfg = base if base is not None else FeatureConfig()
    cfg = replace(cfg, pi=pi_params, prefilter=prefilter_mode, patch_size=patch_size,
                  local_norm="none", channel_limits=None if prefilter_mode == "none" else cfg.channel_limits)
    if prefilter_mode != "none" and cfg.channel_limits is None:
        cfg = fit_channel_limits(maps, cfg)
    return cfg


def sample_patches(maps: Sequence[DepthMap], n: int, size: int, seed: int, margin: int = 0) -> list:
    """``n`` random ``(map, row, col)`` patch locations (uniform map, then uniform origin)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m = maps[int(rng.integers(len(maps)))]
        r = int(rng.integers(m.height - size + 1))
        c = int(rng.integers(m.width - size - margin + 1))
        out.append((m, r, c))
    return out


def noise_stability(patches: Sequence[np.ndarray], snr_levels: Sequence[float] = (5, 10, 15),
                    pi_params: PiParams = PiParams(), prefilter_mode: str = "none", seed: int = 0,
                    cfg: Optional[FeatureConfig] = None) -> StabilityReport:
    """Normalized differences between clean and noisy patches and between their PIs.

    Noise is zero-mean Gaussian with power ``var(patch) / 10**(snr / 10)``.
    An infinite SNR adds no noise.  Pre-filtering, when requested, is applied
    to both the clean and the noisy patch before the PI.
    """
    patches = [np.asarray(p, dtype=float) for p in patches]
    size = patches[0].shape[0]
    fcfg = _stability_cfg(pi_params, prefilter_mode, [DepthMap(p) for p in patches], size, cfg)
    rep = StabilityReport("snr", prefilter_mode)
    for k, p in enumerate(patches):
        clean = _pi_vector(p, fcfg)
        for lev in snr_levels:
            rng = np.random.default_rng(derive_seed(seed, f"noise/{lev}", k))
            if math.isinf(lev):
                noisy = p.copy()
            else:
                power = p.var() / 10.0 ** (lev / 10.0)
                noisy = p + rng.normal(0.0, math.sqrt(power), p.shape)
            rep.rows.append((k, float(lev), normalized_difference(p, noisy),
                             normalized_difference(clean, _pi_vector(noisy, fcfg))))
    return rep


def displacement_stability(maps, offsets: Sequence[int] = (4, 8, 16, 32, 64),
                           pi_params: PiParams = PiParams(), prefilter_mode: str = "none",
                           n_patches: int = 100, patch_size: int = 128, seed: int = 0,
                           cfg: Optional[FeatureConfig] = None) -> StabilityReport:
    """Differences between a patch and the same-size patch shifted right by each offset."""
    if isinstance(maps, DepthMap):
        maps = [maps]
    far = max(offsets) if len(offsets) else 0
    for m in maps:
        if m.width < patch_size + far or m.height < patch_size:
            raise ValueError(f"map {m.shape} too small for patch {patch_size} shifted by {far}")
    fcfg = _stability_cfg(pi_params, prefilter_mode, maps, patch_size, cfg)
    rep = StabilityReport("offset", prefilter_mode)
    for k, (m, r, c) in enumerate(sample_patches(maps, n_patches, patch_size, seed, far)):
        base = m.values[r:r + patch_size, c:c + patch_size]
        pi0 = _pi_vector(base, fcfg)
        for off in offsets:
            moved = m.values[r:r + patch_size, c + off:c + off + patch_size]
            rep.rows.append((k, float(off), normalized_difference(base, moved),
                             normalized_difference(pi0, _pi_vector(moved, fcfg))))
    return rep


# ---------------------------------------------------------------------------
# discriminativity

def _pi_grid(values: np.ndarray, ii: np.ndarray, jj: np.ndarray) -> np.ndarray:
    r = int(max(ii.max(), jj.max())) + 1
    out = np.zeros((r, r))
    out[ii, jj] = values
    return out


def importance_maps(X: FeatureMatrix, model: BoostModel, channel: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Fisher and Gini importances of one channel's PI columns, on the R x R grid."""
    cols, ii, jj = pi_columns(X.columns, channel)
    if model.n_features != X.n_cols:
        raise ValueError("model and feature matrix disagree on the column count")
    fisher = fisher_scores(X).scores[cols]
    gini = gini_importance(model).scores[cols]
    return _pi_grid(fisher, ii, jj), _pi_grid(gini, ii, jj)


def class_average_pi(X: FeatureMatrix, channel: int = 0, groups=None) -> Dict[object, np.ndarray]:
    """Mean PI per class (or per entry of ``groups`` when given)."""
    cols, ii, jj = pi_columns(X.columns, channel)
    keys = X.y if groups is None else np.asarray(groups)
    return {k: _pi_grid(X.X[keys == k][:, cols].mean(axis=0), ii, jj)
            for k in sorted(set(keys.tolist()), key=str)}


def half_max_regions(grid: np.ndarray) -> int:
    """Number of 8-connected regions at or above half the maximum."""
    g = np.asarray(grid, dtype=float)
    if g.max() <= 0:
        return 0
    _, n = ndimage.label(g >= g.max() / 2.0, structure=np.ones((3, 3), dtype=bool))
    return int(n)


def diagonal_locality(grid: np.ndarray, top: float = 0.1) -> Tuple[float, float]:
    """(median diagonal distance of the top-``top`` pixels, median over the whole triangle).

    Pixels are those on or above the diagonal; distance of pixel (i, j) is
    ``(j - i) / sqrt(2)`` in pixel units.
    """
    r = grid.shape[0]
    i, j = np.nonzero(np.triu(np.ones((r, r), dtype=bool)))
    vals = grid[i, j]
    dist = (j - i) / math.sqrt(2.0)
    k = max(1, int(math.ceil(top * len(vals))))
    order = np.lexsort((np.arange(len(vals)), -vals))[:k]
    return float(np.median(dist[order])), float(np.median(dist))
