"""RUSBoost classification, feature rankings and feature selection.

Class 1 (engraved, usually the minority) is the positive class: internally it
maps to ``+1`` and class 2 to ``-1``.  Ties in the ensemble margin go to
class 1.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.tree import DecisionTreeClassifier

MODEL_FORMAT = "topotex-boost"
MODEL_VERSION = 1
EPS_CLIP = 1e-10


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    columns: Tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)
    groups: Optional[np.ndarray] = None    # optional per-row source index

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"feature matrix {self.X.shape} does not match {self.y.shape[0]} labels")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("feature matrix holds non-finite entries")
        if not self.columns:
            self.columns = tuple(f"f{i}" for i in range(self.X.shape[1]))
        if len(self.columns) != self.X.shape[1]:
            raise ValueError("column tag count does not match feature count")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    def rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(self.X[idx], self.y[idx], self.columns, dict(self.provenance),
                             None if self.groups is None else self.groups[idx])

    def cols(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        prov = dict(self.provenance)
        prov["selected_columns"] = idx.tolist()
        return FeatureMatrix(self.X[:, idx], self.y, tuple(self.columns[i] for i in idx), prov, self.groups)


@dataclass
class BoostParams:
    rounds: int = 200
    max_depth: int = 3


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf.

    Samples with ``x[feature] <= threshold`` go left.  Leaves carry an output
    of ``+1`` or ``-1``.  ``weight`` and ``impurity`` are the weighted sample
    mass and Gini impurity of each node on the round's training subset.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    output: np.ndarray
    weight: np.ndarray
    impurity: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        X32 = np.asarray(X, dtype=np.float32)
        node = np.zeros(X32.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X32[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.output[self.apply(X)]

    @classmethod
    def from_sklearn(cls, est: DecisionTreeClassifier) -> "Tree":
        t = est.tree_
        classes = est.classes_
        value = t.value[:, 0, :]
        pos = value[:, list(classes).index(1)] if 1 in classes else np.zeros(t.node_count)
        neg = value[:, list(classes).index(-1)] if -1 in classes else np.zeros(t.node_count)
        feature = np.where(t.children_left >= 0, t.feature, -1).astype(np.int64)
        return cls(feature=feature,
                   threshold=np.where(feature >= 0, t.threshold, 0.0).astype(np.float64),
                   left=t.children_left.astype(np.int64),
                   right=t.children_right.astype(np.int64),
                   output=np.where(pos >= neg, 1, -1).astype(np.int64),
                   weight=t.weighted_n_node_samples.astype(np.float64),
                   impurity=t.impurity.astype(np.float64))

    def gini_decrease(self, n_features: int) -> np.ndarray:
        out = np.zeros(n_features)
        for i in np.flatnonzero(self.feature >= 0):
            l, r = self.left[i], self.right[i]
            dec = (self.weight[i] * self.impurity[i] - self.weight[l] * self.impurity[l]
                   - self.weight[r] * self.impurity[r])
            out[self.feature[i]] += max(dec, 0.0)
        return out


@dataclass
class BoostModel:
    trees: List[Tree]
    alphas: np.ndarray
    n_features: int
    params: BoostParams
    seed: int
    subset_log: List[Tuple[int, int]] = field(default_factory=list, compare=False)
    meta: dict = field(default_factory=dict)     # free-form string tags, e.g. the feature hash

    def margins(self, X, rounds: Optional[int] = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        t = len(self.trees) if rounds is None else min(rounds, len(self.trees))
        m = np.zeros(X.shape[0])
        for tree, a in zip(self.trees[:t], self.alphas[:t]):
            m += a * tree.predict(X)
        return m

    def staged_margins(self, X, stages: Sequence[int]) -> dict:
        X = np.asarray(X, dtype=np.float64)
        out = {}
        m = np.zeros(X.shape[0])
        wanted = set(stages)
        for t, (tree, a) in enumerate(zip(self.trees, self.alphas), start=1):
            m = m + a * tree.predict(X)
            if t in wanted:
                out[t] = m.copy()
        for s in stages:
            out.setdefault(s, m.copy())
        return out

    def predict_labels(self, X, rounds: Optional[int] = None) -> np.ndarray:
        return np.where(self.margins(X, rounds) >= 0, 1, 2)


def _signed(y: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(y) == 1, 1, -1)


def rusboost_train(X: FeatureMatrix, params: BoostParams = BoostParams(), seed: int = 0,
                   undersample: bool = True) -> BoostModel:
    """Discrete AdaBoost whose rounds each fit on a class-balanced subset.

    Every round keeps all minority rows and draws as many majority rows
    without replacement, with probabilities proportional to the current
    boosting weights.  The weak learner (a depth-limited Gini tree) is fit on
    that subset with the subset's renormalized weights; error and weight
    update use the full training set.  ``undersample=False`` gives plain
    AdaBoost with the same trees.
    """
    Xv, y = X.X, X.y
    if params.rounds < 1:
        raise ValueError("need at least one boosting round")
    present = set(np.unique(y).tolist())
    if present != {1, 2}:
        raise ValueError(f"training needs both classes 1 and 2, found {sorted(present)}")
    s = _signed(y)
    n = len(y)
    rng = np.random.default_rng(seed)
    w = np.full(n, 1.0 / n)
    pos_idx, neg_idx = np.flatnonzero(s == 1), np.flatnonzero(s == -1)
    if len(pos_idx) <= len(neg_idx):
        minority, majority = pos_idx, neg_idx
    else:
        minority, majority = neg_idx, pos_idx
    trees, alphas, log = [], [], []
    for t in range(params.rounds):
        if undersample:
            p = w[majority] / w[majority].sum()
            drawn = rng.choice(majority, size=len(minority), replace=False, p=p)
            subset = np.sort(np.concatenate([minority, drawn]))
        else:
            subset = np.arange(n)
        sw = w[subset] / w[subset].sum()
        log.append((int(np.sum(s[subset] == 1)), int(np.sum(s[subset] == -1))))
        est = DecisionTreeClassifier(max_depth=params.max_depth,
                                     random_state=int(rng.integers(2 ** 31 - 1)))
        est.fit(Xv[subset], s[subset], sample_weight=sw)
        tree = Tree.from_sklearn(est)
        h = tree.predict(Xv)
        eps = float(np.clip(w[h != s].sum() / w.sum(), EPS_CLIP, 1 - EPS_CLIP))
        alpha = 0.5 * math.log((1 - eps) / eps)
        w = w * np.exp(-alpha * s * h)
        w = w / w.sum()
        trees.append(tree)
        alphas.append(alpha)
    return BoostModel(trees, np.array(alphas), Xv.shape[1], params, seed, log)


def predict(m: BoostModel, v) -> Tuple[int, float]:
    """Class (1 or 2) and ensemble margin for one feature vector."""
    vals = v.values if hasattr(v, "values") else np.asarray(v, dtype=float)
    vals = np.asarray(vals, dtype=float).reshape(-1)
    if len(vals) != m.n_features:
        raise ValueError(f"expected {m.n_features} features, got {len(vals)}")
    margin = float(m.margins(vals[None])[0])
    return (1 if margin >= 0 else 2), margin


# ---------------------------------------------------------------------------
# rankings and selection

@dataclass
class FeatureRanking:
    scores: np.ndarray
    method: str

    def order(self) -> np.ndarray:
        """Column indices, best first; ties go to the lower index."""
        return np.lexsort((np.arange(len(self.scores)), -self.scores))


def gini_importance(m: BoostModel) -> FeatureRanking:
    total = np.zeros(m.n_features)
    for tree, a in zip(m.trees, m.alphas):
        total += a * tree.gini_decrease(m.n_features)
    return FeatureRanking(np.maximum(total, 0.0), "gini")


def fisher_scores(X: FeatureMatrix) -> FeatureRanking:
    """``(mu1 - mu2)^2 / (var1 + var2)`` per column, population variances."""
    a, b = X.X[X.y == 1], X.X[X.y == 2]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Fisher scores need both classes")
    num = (a.mean(axis=0) - b.mean(axis=0)) ** 2
    den = a.var(axis=0) + b.var(axis=0)
    zero = den == 0
    if np.any(zero & (num > 0)):
        warnings.warn("Fisher score of columns constant within each class but different across classes set to 0",
                      RuntimeWarning, stacklevel=2)
    scores = np.zeros_like(num)
    scores[~zero] = num[~zero] / den[~zero]
    return FeatureRanking(scores, "fisher")


def _ranks(r: FeatureRanking) -> np.ndarray:
    pos = np.empty(len(r.scores))
    pos[r.order()] = np.arange(len(r.scores))
    return pos


def combined_ranking(gini: FeatureRanking, fisher: FeatureRanking) -> FeatureRanking:
    """Average rank position of both rankings (negated so higher is better)."""
    return FeatureRanking(-(_ranks(gini) + _ranks(fisher)) / 2.0, "combined")


def random_ranking(n_cols: int, seed: int) -> FeatureRanking:
    return FeatureRanking(np.random.default_rng(seed).random(n_cols), "random")


def select_features(r: FeatureRanking, pct: float, seed: Optional[int] = None) -> np.ndarray:
    """Indices of the best ``ceil(pct% * n)`` columns in ranking order."""
    if not 0 < pct <= 100:
        raise ValueError("pct must lie in (0, 100]")
    n = len(r.scores)
    k = min(n, math.ceil(pct / 100.0 * n - 1e-9))
    if r.method == "random" and seed is not None:
        return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return r.order()[:k]


# ---------------------------------------------------------------------------
# model files

def _f(x: float) -> str:
    return format(float(x), ".17g")


def dumps_model(m: BoostModel) -> str:
    """Line-oriented text serialization; reals carry 17 significant digits."""
    lines = [f"format {MODEL_FORMAT}", f"version {MODEL_VERSION}",
             f"n_features {m.n_features}", f"rounds {m.params.rounds}",
             f"max_depth {m.params.max_depth}", f"seed {m.seed}", f"n_meta {len(m.meta)}"]
    for k in sorted(m.meta):
        if not str(k).isidentifier() or any(ch.isspace() for ch in str(m.meta[k])) or not str(m.meta[k]):
            raise ValueError(f"model tag {k!r}={m.meta[k]!r} must be a bare word")
        lines.append(f"meta {k} {m.meta[k]}")
    lines.append(f"n_learners {len(m.trees)}")
    for t, (tree, a) in enumerate(zip(m.trees, m.alphas)):
        lines.append(f"learner {t} alpha {_f(a)} nodes {len(tree.feature)}")
        for i in range(len(tree.feature)):
            lines.append(
                f"node {i} feature {tree.feature[i]} threshold {_f(tree.threshold[i])} "
                f"left {tree.left[i]} right {tree.right[i]} output {tree.output[i]} "
                f"weight {_f(tree.weight[i])} impurity {_f(tree.impurity[i])}")
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> BoostModel:
    it = iter(ln.split() for ln in text.splitlines() if ln.strip())
    head, meta = {}, {}
    for _ in range(6):
        key, val = next(it)
        head[key] = val
    for _ in range(int(next(it)[1])):
        _, key, val = next(it)
        meta[key] = val
    head["n_learners"] = next(it)[1]
    if head.get("format") != MODEL_FORMAT:
        raise ValueError("not a topotex boost model file")
    if int(head["version"]) != MODEL_VERSION:
        raise ValueError(f"unsupported model version {head['version']}")
    trees, alphas = [], []
    for _ in range(int(head["n_learners"])):
        tok = next(it)
        rec = dict(zip(tok[::2], tok[1::2]))
        alphas.append(float(rec["alpha"]))
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "output", "weight", "impurity")}
        for _ in range(int(rec["nodes"])):
            ntok = next(it)
            nrec = dict(zip(ntok[::2], ntok[1::2]))
            for k in cols:
                cols[k].append(nrec[k])
        trees.append(Tree(feature=np.array(cols["feature"], dtype=np.int64),
                          threshold=np.array(cols["threshold"], dtype=np.float64),
                          left=np.array(cols["left"], dtype=np.int64),
                          right=np.array(cols["right"], dtype=np.int64),
                          output=np.array(cols["output"], dtype=np.int64),
                          weight=np.array(cols["weight"], dtype=np.float64),
                          impurity=np.array(cols["impurity"], dtype=np.float64)))
    params = BoostParams(rounds=int(head["rounds"]), max_depth=int(head["max_depth"]))
    return BoostModel(trees, np.array(alphas), int(head["n_features"]), params, int(head["seed"]), meta=meta)


def save_model(m: BoostModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(m))


def load_model(path) -> BoostModel:
    with open(path) as fh:
        return loads_model(fh.read())
