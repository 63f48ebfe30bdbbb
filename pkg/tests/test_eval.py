import math

import numpy as np
import pytest

from topotex.config import ProtocolConfig, SelectionConfig
from topotex.descriptors import PiParams
from topotex.eval import (EvaluationSet, StabilityReport, class_average_pi, diagonal_locality, dsc,
                          displacement_stability, half_max_regions, importance_maps, noise_stability,
                          normalized_difference, pooled_dsc, rasterize, run_protocol, sample_patches)
from topotex.features import MapFeatures
from topotex.grid_io import DepthMap, LabelMask, patch_origins
from topotex.learn import BoostModel, BoostParams, FeatureMatrix, Tree, rusboost_train
from topotex.synth import SynthConfig, synthetic_dataset


def mask_from(a):
    return LabelMask(np.where(np.asarray(a, bool), 1, 2))


# ---------------------------------------------------------------------------
# metrics

def test_dsc_examples():
    x = np.zeros((10, 10), bool)
    x[0, :5] = True
    assert dsc(mask_from(x), mask_from(x)) == 1
    y = np.zeros((10, 10), bool)
    y[5, :] = True
    assert dsc(mask_from(x), mask_from(y)) == 0
    a = np.zeros((1, 20), bool)
    b = np.zeros((1, 20), bool)
    a[0, :10] = True
    b[0, 5:15] = True
    assert dsc(mask_from(a), mask_from(b)) == 0.5
    empty = mask_from(np.zeros((1, 20), bool))
    assert dsc(empty, empty) == 1 and dsc(empty, mask_from(a)) == 0
    with pytest.raises(ValueError):
        dsc(mask_from(a), mask_from(np.zeros((1, 21), bool)))


def test_dsc_symmetric_and_pooled():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.random((8, 8)) < 0.4, rng.random((8, 8)) < 0.3
        assert dsc(mask_from(a), mask_from(b)) == dsc(mask_from(b), mask_from(a))
    a, b = rng.random((6, 6)) < 0.5, rng.random((6, 6)) < 0.5
    c, d = rng.random((4, 4)) < 0.5, rng.random((4, 4)) < 0.5
    inter = np.sum(a & b) + np.sum(c & d)
    exp = 2 * inter / (a.sum() + b.sum() + c.sum() + d.sum())
    assert pooled_dsc([(mask_from(a), mask_from(b)), (mask_from(c), mask_from(d))]) == exp


def test_normalized_difference():
    a = np.array([[1.0, -2.0], [3.0, 0.5]])
    assert normalized_difference(a, a) == 0
    assert normalized_difference(a, -a) == 1
    assert normalized_difference([1, 0], [0, 1]) == 1
    assert normalized_difference(np.zeros(3), np.zeros(3)) == 0
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = normalized_difference(rng.normal(size=9), rng.normal(size=9))
        assert 0 <= d <= 1
    with pytest.raises(ValueError):
        normalized_difference([1, 2], [1, 2, 3])


def test_rasterize_votes():
    # two 2x2 patches overlapping on column 1, plus an uncovered column
    origins = np.array([[0, 0], [0, 1]])
    m = rasterize((2, 4), origins, 2, np.array([1, 2])).labels
    assert m[:, 0].tolist() == [1, 1]        # only the class-1 patch
    assert m[:, 1].tolist() == [1, 1]        # 1:1 tie goes to class 1
    assert m[:, 2].tolist() == [2, 2]
    assert m[:, 3].tolist() == [2, 2]        # uncovered
    three = rasterize((3, 3), np.array([[0, 0], [0, 1], [1, 0]]), 2, np.array([1, 2, 2])).labels
    assert three[1, 1] == 2


def test_rasterize_matches_loop_oracle():
    rng = np.random.default_rng(2)
    shape, size, stride = (40, 33), 8, 5
    origins = np.array(patch_origins(shape, size, stride))
    labels = rng.integers(1, 3, len(origins))
    v1 = np.zeros(shape, int)
    v2 = np.zeros(shape, int)
    for (r, c), lab in zip(origins, labels):
        (v1 if lab == 1 else v2)[r:r + size, c:c + size] += 1
    exp = np.where((v1 >= v2) & (v1 + v2 > 0), 1, 2)
    assert np.array_equal(rasterize(shape, origins, size, labels).labels, exp)


# ---------------------------------------------------------------------------
# protocol

def toy_maps(seed, n_maps=4, shape=(48, 48), size=16, stride=8):
    """Maps whose right half is class 1; feature 0 is the covered class-1 fraction plus noise."""
    rng = np.random.default_rng(seed)
    maps, truths = [], []
    origins = np.array(patch_origins(shape, size, stride))
    for k in range(n_maps):
        truth = np.full(shape, 2)
        if k % 2 == 0:
            truth[:, shape[1] // 2:] = 1
        frac = np.array([np.mean(truth[r:r + size, c:c + size] == 1) for r, c in origins])
        X = np.c_[frac + rng.normal(0, 0.1, len(origins)), rng.normal(size=(len(origins), 2))]
        labels = np.where(frac >= 0.5, 1, 2)
        maps.append(MapFeatures(f"m{seed}_{k}", shape, size, stride, origins, X, labels))
        truths.append(LabelMask(truth))
    return maps, truths


def toy_split():
    train_maps, _ = toy_maps(0)
    test_maps, test_truths = toy_maps(1)
    X = FeatureMatrix(np.vstack([m.X for m in train_maps]), np.concatenate([m.labels for m in train_maps]))
    return X, test_maps, test_truths


QUICK = dict(folds=3, depth_grid=(1, 2), rounds_grid=(5, 10))


class Recorder(EvaluationSet):
    def __init__(self, *a):
        super().__init__(*a)
        self.events = []

    def predict_masks(self, fn):
        self.events.append("predict")
        return super().predict_masks(fn)

    def reveal_truth(self):
        self.events.append("truth")
        return super().reveal_truth()


def test_protocol_reads_truth_only_after_predicting():
    X, maps, truths = toy_split()
    ev = Recorder(maps, truths)
    assert all(m.labels is None for m in ev.maps)
    rep = run_protocol(X, ev, ProtocolConfig(repetitions=3, **QUICK), master_seed=4)
    assert ev.truth_reads == 4
    assert ev.events == ["predict", "truth"] * 3 + ["truth"]
    assert len(rep.dsc) == 3 and rep.mean > 0.8
    assert rep.baseline_dsc == 0


def test_protocol_deterministic_and_report_consistent():
    X, maps, truths = toy_split()
    cfg = ProtocolConfig(repetitions=2, **QUICK)
    a = run_protocol(X, EvaluationSet(maps, truths), cfg, master_seed=7)
    b = run_protocol(X, EvaluationSet(maps, truths), cfg, master_seed=7)
    assert a.to_csv() == b.to_csv() and a.seeds == b.seeds
    assert abs(a.mean - math.fsum(a.dsc) / len(a.dsc)) < 1e-12
    assert abs(a.std - math.sqrt(math.fsum((v - a.mean) ** 2 for v in a.dsc) / len(a.dsc))) < 1e-12
    assert a.to_csv().splitlines()[0] == "repetition,seed,max_depth,rounds,dsc"
    assert all(d in (1, 2) and t in (5, 10) for d, t in a.chosen)


def test_protocol_full_subset_single_repetition():
    X, maps, truths = toy_split()
    cfg = ProtocolConfig(repetitions=1, subset_fraction=1.0, **QUICK)
    a = run_protocol(X, EvaluationSet(maps, truths), cfg, master_seed=1)
    b = run_protocol(X, EvaluationSet(maps, truths), cfg, master_seed=1)
    assert len(a.dsc) == 1 and a.dsc[0] == b.dsc[0]


def test_protocol_with_feature_selection():
    X, maps, truths = toy_split()
    cfg = ProtocolConfig(repetitions=1, selection=SelectionConfig("fisher", 34.0), **QUICK)
    rep = run_protocol(X, EvaluationSet(maps, truths), cfg, master_seed=2)
    assert rep.dsc[0] > 0.8


def test_protocol_rejects_width_mismatch():
    X, maps, truths = toy_split()
    with pytest.raises(ValueError):
        run_protocol(X.cols([0, 1]), EvaluationSet(maps, truths), ProtocolConfig(repetitions=1, **QUICK))


# ---------------------------------------------------------------------------
# stability

@pytest.fixture(scope="module")
def synth_maps():
    return [s.depth for s in synthetic_dataset(SynthConfig(size=(160, 224)), 1, 1, 1, seed=5)]


def test_noise_stability_limits(synth_maps):
    patches = _patches(synth_maps, 6, 48)
    rep = noise_stability(patches, (math.inf, 5, 15), PiParams(), "none", seed=3)
    assert isinstance(rep, StabilityReport) and rep.levels() == [5.0, 15.0, math.inf]
    assert rep.mean_pi_difference(math.inf) == 0 and rep.mean_patch_difference(math.inf) == 0
    assert rep.mean_pi_difference(5) > rep.mean_pi_difference(15)
    assert rep.mean_patch_difference(5) > rep.mean_patch_difference(15)
    assert all(0 <= r[2] <= 1 and 0 <= r[3] <= 1 for r in rep.rows)
    assert len(rep.to_csv().splitlines()) == 1 + 3 * 6


def test_snr_scaling_matches_definition():
    p = np.random.default_rng(4).normal(0, 2, (200, 200))
    rep = noise_stability([p], (10,), seed=0)
    # Gaussian fields: E|x| is proportional to the std, so d -> sn / (sp + sqrt(sp^2 + sn^2))
    sp, sn = 2.0, 2.0 / math.sqrt(10)
    assert rep.rows[0][2] == pytest.approx(sn / (sp + math.hypot(sp, sn)), rel=0.01)


def _patches(maps, n, size):
    return [m.values[r:r + size, c:c + size] for m, r, c in sample_patches(maps, n, size, seed=1)]


def test_displacement_zero_offset_and_trend(synth_maps):
    rep = displacement_stability(synth_maps, (0, 4, 64), n_patches=8, patch_size=64, seed=2)
    assert rep.mean_pi_difference(0) == 0
    assert rep.mean_pi_difference(4) <= rep.mean_pi_difference(64)
    with pytest.raises(ValueError):
        displacement_stability(synth_maps, (200,), n_patches=1, patch_size=64)


def test_clbp_displacement_below_raw(synth_maps):
    offsets = (4, 8, 16, 32, 64)
    raw = displacement_stability(synth_maps, offsets, n_patches=12, patch_size=96, seed=6)
    lbp = displacement_stability(synth_maps, offsets, n_patches=12, patch_size=96, seed=6,
                                 prefilter_mode="clbp")
    for off in offsets:
        assert lbp.mean_pi_difference(off) < raw.mean_pi_difference(off), off


# ---------------------------------------------------------------------------
# discriminativity

def pi_matrix(rng, n, r=4):
    cols = tuple(f"c0_pi_{i}_{j}" for i in range(r) for j in range(i, r))
    X = rng.random((n, len(cols)))
    return cols, X


def test_importance_maps_shapes_and_zero_gini():
    rng = np.random.default_rng(5)
    cols, X = pi_matrix(rng, 30)
    cols = cols + ("c0_agg_count",)
    X = np.c_[X, rng.random(30)]
    y = np.where(rng.random(30) < 0.5, 1, 2)
    fm = FeatureMatrix(X, y, cols)
    t = Tree(np.array([10, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
             np.array([0, 1, -1]), np.array([1.0, 0.5, 0.5]), np.array([0.5, 0.0, 0.0]))
    m = BoostModel([t], np.array([1.0]), 11, BoostParams(1, 1), 0)
    fisher, gini = importance_maps(fm, m)
    assert fisher.shape == gini.shape == (4, 4)
    assert np.all(gini == 0)
    assert np.all(fisher >= 0) and np.all(np.tril(fisher, -1) == 0)
    trained = rusboost_train(fm, BoostParams(10, 2), 0)
    _, g2 = importance_maps(fm, trained)
    assert np.all(g2 >= 0)
    with pytest.raises(ValueError):
        importance_maps(FeatureMatrix(X[:, -1:], y, ("c0_agg_count",)), m)


def test_class_average_pi():
    rng = np.random.default_rng(6)
    cols, X = pi_matrix(rng, 5)
    y = np.array([1, 2, 2, 2, 2])
    avg = class_average_pi(FeatureMatrix(X, y, cols))
    assert np.array_equal(avg[1][np.triu_indices(4)], X[0])
    assert np.allclose(avg[2][np.triu_indices(4)], X[1:].mean(axis=0))


def test_half_max_regions():
    g = np.zeros((8, 8))
    g[1, 1] = 1
    assert half_max_regions(g) == 1
    g[5, 6] = 0.8
    assert half_max_regions(g) == 2
    g[2, 2] = 0.6          # diagonal neighbour joins the first blob
    assert half_max_regions(g) == 2
    g[5, 6] = 0.4
    assert half_max_regions(g) == 1
    assert half_max_regions(np.zeros((3, 3))) == 0


def test_diagonal_locality():
    r = 8
    i, j = np.indices((r, r))
    near = 1.0 / (1 + np.abs(j - i))
    top, overall = diagonal_locality(near)
    assert top == 0 and overall > 0
    far = np.where(j >= i, (j - i).astype(float), 0.0)
    top, overall = diagonal_locality(far)
    assert top > overall
