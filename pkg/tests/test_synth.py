import numpy as np
import pytest

from topotex.cubical import patch_diagram
from topotex.synth import (SynthConfig, compose, engraved_mask, gen_engraved, gen_flat, gen_noise_field,
                           pit_centers, pit_field, surface_triple, synthetic_dataset)


def test_flat():
    f = gen_flat((7, 9))
    assert f.shape == (7, 9) and np.all(f.values == 0)
    assert f.values.mean() == 0 and f.values.var() == 0
    assert len(patch_diagram(f.values[:7, :7], "drop")) == 0


def test_regular_pit_grid():
    cfg = SynthConfig(size=(100, 100), spacing_mean=20, spacing_jitter=0)
    c = pit_centers(cfg)
    assert len(c) == 25
    assert sorted(set(c[:, 0].tolist())) == [10, 30, 50, 70, 90]
    assert sorted(set(c[:, 1].tolist())) == [10, 30, 50, 70, 90]


def test_jitter_bounds():
    cfg = SynthConfig(size=(200, 200), spacing_mean=30, spacing_jitter=5, seed=3)
    c = pit_centers(cfg)
    nominal = pit_centers(SynthConfig(size=(200, 200), spacing_mean=30, spacing_jitter=0))
    off = c - nominal
    assert np.all(np.abs(off) <= 5) and np.abs(off).max() > 4


def test_engraved_values():
    for seed in range(3):
        cfg = SynthConfig(size=(128, 128), pit_depth=3.0, seed=seed)
        e = gen_engraved(cfg).values
        assert np.all(e <= 0)
        assert e.min() >= -1.2 * cfg.pit_depth
        assert e.min() <= -0.9 * cfg.pit_depth


def test_pit_field_single_pit():
    f = pit_field((21, 21), np.array([[10.0, 10.0]]), 2.0, 3.0)
    assert f[10, 10] == -2.0
    assert f[10, 13] == pytest.approx(-2.0 * np.exp(-0.5))


def test_noise_field_white():
    n = gen_noise_field((256, 256), 0, 1.5, seed=1).values
    assert abs(np.sqrt(np.mean(n * n)) - 1.5) < 0.02 * 1.5
    assert abs(n.mean()) <= 0.02 * 1.5


def test_noise_field_correlated():
    n = gen_noise_field((256, 256), 3, 1.0, seed=2).values
    assert abs(n.mean()) <= 0.02

    def acf(lag):
        a, b = n[:, :-lag], n[:, lag:]
        return np.mean(a * b) / np.mean(n * n)

    assert acf(3) > acf(12)
    with pytest.raises(ValueError):
        gen_noise_field((8, 8), -1, 1.0, 0)


def test_compose():
    noise = gen_noise_field((64, 64), 2, 1.0, seed=4)
    flat = compose(gen_flat((64, 64)), noise).values
    z = (noise.values - noise.values.mean()) / noise.values.std()
    assert np.allclose(flat, z, atol=1e-12)
    cfg = SynthConfig(size=(64, 64), seed=5)
    eng = gen_engraved(cfg)
    out = compose(eng, noise).values
    assert abs(out.mean()) < 1e-9 and abs(out.std() - 1) < 1e-9
    raw = (eng.values + noise.values) - noise.values
    assert np.array_equal(raw != 0, eng.values != 0)
    with pytest.raises(ValueError):
        compose(gen_flat((4, 4)), gen_flat((4, 5)))


def test_mask():
    m = engraved_mask((10, 10), np.array([[2.0, 2.0]]), 1.5).labels
    assert m[2, 2] == 1 and m[3, 3] == 1 and m[4, 2] == 2 and m[9, 9] == 2


def test_config_invariants():
    with pytest.raises(ValueError):
        SynthConfig(spacing_mean=10, spacing_jitter=5)
    with pytest.raises(ValueError):
        SynthConfig(pit_sigma=0)
    assert SynthConfig(spacing_mean=24).sigma == 4


def test_triple_and_dataset_determinism():
    cfg = SynthConfig(size=(96, 96), seed=8)
    a, b = surface_triple(cfg), surface_triple(cfg)
    assert [s.kind for s in a] == ["natural", "engraved_I", "engraved_II"]
    for x, y in zip(a, b):
        assert np.array_equal(x.depth.values, y.depth.values)
        assert np.array_equal(x.mask.labels, y.mask.labels)
    assert np.all(a[0].mask.labels == 2) and np.any(a[1].mask.labels == 1)
    d1 = synthetic_dataset(cfg, 2, 1, 1, seed=3, prefix="train_")
    d2 = synthetic_dataset(cfg, 2, 1, 1, seed=3, prefix="train_")
    assert [s.name for s in d1] == ["train_natural_00", "train_natural_01", "train_engraved_I_02",
                                    "train_engraved_II_03"]
    assert all(np.array_equal(x.depth.values, y.depth.values) for x, y in zip(d1, d2))
    assert not np.array_equal(d1[0].depth.values, d1[1].depth.values)
