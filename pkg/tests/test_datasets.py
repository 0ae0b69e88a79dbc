import numpy as np
import pytest

from swadlab.bench.datasets import (BalancedSampler, SplitPlan, gen_rotated_moons,
                                    gen_spurious_gaussians, make_splits)
from swadlab.params import make_rng


def test_rotated_moons_shape_balance_and_determinism():
    ds = gen_rotated_moons(100, [0, 30, 60], 0.1, seed=3)
    assert ds.domain_ids == [0, 1, 2] and ds.input_dim == 2 and ds.num_classes == 2
    for d in ds.domains:
        assert len(d) == 100 and np.bincount(d.labels).tolist() == [50, 50]
    again = gen_rotated_moons(100, [0, 30, 60], 0.1, seed=3)
    assert all(np.array_equal(a.inputs, b.inputs) for a, b in zip(ds.domains, again.domains))
    other = gen_rotated_moons(100, [0, 30, 60], 0.1, seed=4)
    assert not np.array_equal(ds.domains[0].inputs, other.domains[0].inputs)


def test_rotation_is_about_the_centre():
    a = gen_rotated_moons(40, [0, 90], 0.0, seed=0)
    x0, x1 = a.domains[0].inputs, a.domains[1].inputs
    # domain streams are keyed by position, so position 0 has the same base points in both
    r = np.array([[0.0, -1.0], [1.0, 0.0]])
    b = gen_rotated_moons(40, [90, 0], 0.0, seed=0)
    np.testing.assert_allclose(b.domains[0].inputs, x0 @ r.T, atol=1e-12)
    np.testing.assert_allclose(np.abs(x0.mean(axis=0)), 0, atol=0.2)
    assert x1.shape == x0.shape


def test_noise_free_moons_lie_on_half_circles():
    ds = gen_rotated_moons(60, [0, 10], 0.0)
    d = ds.domains[0]
    x = d.inputs + np.array([0.5, 0.25])
    up = x[d.labels == 0]
    lo = x[d.labels == 1]
    np.testing.assert_allclose(np.hypot(up[:, 0], up[:, 1]), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.hypot(lo[:, 0] - 1, lo[:, 1] - 0.5), 1.0, atol=1e-12)


def test_label_noise_keeps_balance():
    noisy = gen_rotated_moons(100, [0, 1], 0.0, seed=0, label_noise=0.2)
    d = noisy.domains[0]
    assert np.bincount(d.labels).tolist() == [50, 50]
    # noise-free points reveal their true moon: the upper one is the unit circle at the origin
    x = d.inputs + np.array([0.5, 0.25])
    true = (np.abs(np.hypot(x[:, 0], x[:, 1]) - 1.0) > 1e-9).astype(int)
    flipped = d.labels != true
    assert int(flipped.sum()) == 20
    assert int(flipped[true == 0].sum()) == 10


def test_generator_validation():
    for kwargs in [dict(n_per_domain=3, angles_degrees=[0, 1]), dict(n_per_domain=5, angles_degrees=[0, 1]),
                   dict(n_per_domain=10, angles_degrees=[0]),
                   dict(n_per_domain=10, angles_degrees=[0, 1], noise_sigma=-1)]:
        with pytest.raises(ValueError):
            gen_rotated_moons(**kwargs)
    with pytest.raises(ValueError):
        gen_spurious_gaussians(10, [0.5, 1.5])


def test_spurious_correlation_rates():
    ds = gen_spurious_gaussians(4000, [0.9, -0.5], signal_dim=3, seed=1)
    assert ds.input_dim == 4
    for d, corr in zip(ds.domains, [0.9, -0.5]):
        agree = np.mean(np.sign(d.inputs[:, -1]) == 2 * d.labels - 1)
        assert agree == pytest.approx((1 + corr) / 2, abs=0.03)
        assert np.all(np.abs(d.inputs[:, -1]) >= 0.5)


def test_splits_are_disjoint_and_exclude_target():
    ds = gen_rotated_moons(50, [0, 20, 40], 0.1)
    sp = make_splits(ds, SplitPlan(1, (0.6, 0.2, 0.2), seed=2))
    assert sp.source_ids == [0, 2]
    assert np.array_equal(sp.target.inputs, ds.domain(1).inputs)
    for k, parts in sp.indices.items():
        allidx = np.concatenate(parts)
        assert sorted(allidx.tolist()) == list(range(50))
        assert [len(p) for p in parts] == [30, 10, 10]
    assert len(sp.pooled_train()) == 60 and len(sp.pooled_test()) == 20
    two = make_splits(ds, SplitPlan(0))
    assert two.pooled_test() is None and len(two.pooled_val()) == 20
    with pytest.raises(ValueError):
        SplitPlan(0, (0.5, 0.6))
    with pytest.raises(KeyError):
        make_splits(ds, SplitPlan(9))


def test_balanced_sampler_epochs():
    ds = gen_rotated_moons(20, [0, 20, 40], 0.1)
    sp = make_splits(ds, SplitPlan(0, (0.5, 0.5)))
    s = BalancedSampler(sp.train, 4, make_rng(0))
    for _ in range(5):
        b = s.next()
        assert len(b) == 8 and sorted(set(b.domain_ids.tolist())) == [1, 2]
    # 5 batches x 4 = 20 = two full epochs of 10 examples per domain
    s = BalancedSampler(sp.train, 5, make_rng(0))
    idx = np.concatenate([s._take(1) for _ in range(2)])
    assert sorted(idx.tolist()) == list(range(10))
    with pytest.raises(ValueError):
        BalancedSampler(sp.train, 0, make_rng(0))
