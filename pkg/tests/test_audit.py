import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faircpd import audit
from faircpd.errors import DimensionError

FAST = audit.AuditConfig(hidden_width=64, lr=0.1, epochs=100)


def clusters(seed, n=200, gap=6.0):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    a = rng.standard_normal((n, 3)) + gap * labels[:, None]
    return a, labels


def test_separable_clusters():
    a, labels = clusters(0)
    res = audit.unfairness(a, labels, audit.AuditConfig(seed=1))
    assert res.accuracy > 0.95
    assert res.unfairness == pytest.approx(res.accuracy - 0.5)


def test_random_labels_near_zero():
    vals = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((200, 3))
        labels = rng.permutation(np.repeat([0, 1], 100))
        vals.append(audit.unfairness(a, labels, audit.AuditConfig(seed=seed)).unfairness)
    assert abs(np.mean(vals)) < 0.05


def test_unbalanced_random_labels_toward_floor():
    rng = np.random.default_rng(0)
    n = 400
    labels = (rng.random(n) < 0.749).astype(int)
    a = rng.standard_normal((n, 3))
    res = audit.unfairness(a, labels, audit.AuditConfig(seed=0, standardize=True))
    assert res.majority_floor > 0.15
    assert abs(res.unfairness - res.majority_floor) < 0.1


def test_zero_epochs_keeps_initialization():
    a, labels = clusters(1, n=20)
    cfg = audit.AuditConfig(hidden_width=8, epochs=0, seed=3)
    p = audit.train_probe(a, labels, cfg)
    rng = np.random.default_rng(3)
    audit.split_indices(20, cfg.train_fraction, rng)
    np.testing.assert_array_equal(p.w1, rng.uniform(-1 / np.sqrt(3), 1 / np.sqrt(3), (3, 8)))


def test_split_depends_only_on_row_count():
    a1, labels = clusters(0, n=40)
    a2 = np.random.default_rng(9).standard_normal((40, 5))
    p1 = audit.train_probe(a1, labels, audit.AuditConfig(hidden_width=4, epochs=1, seed=2))
    p2 = audit.train_probe(a2, labels, audit.AuditConfig(hidden_width=4, epochs=1, seed=2))
    np.testing.assert_array_equal(p1.test_idx, p2.test_idx)
    assert p1.train_idx.size == 30 and p1.test_idx.size == 10


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 500), frac=st.floats(0.01, 0.99))
def test_split_partitions_rows(n, frac):
    tr, te = audit.split_indices(n, frac, np.random.default_rng(0))
    assert tr.size >= 1 and te.size >= 1
    np.testing.assert_array_equal(np.sort(np.r_[tr, te]), np.arange(n))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 10), r=st.integers(1, 4))
def test_forward_shapes_and_probabilities(seed, n, r):
    rng = np.random.default_rng(seed)
    p = audit.ProbeModel(rng.standard_normal((r, 5)), rng.standard_normal(5), rng.standard_normal((5, 2)))
    out = p.forward(rng.standard_normal((n, r)))
    assert out.shape == (n, 2)
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    assert p.predict(rng.standard_normal((n, r))).shape == (n,)


def test_default_width_shapes():
    a, labels = clusters(4, n=12)
    p = audit.train_probe(a, labels, audit.AuditConfig(epochs=1))
    assert p.hidden(a).shape == (12, 1500)
    assert np.abs(p.forward(a).sum(axis=1) - 1).max() < 1e-9


def test_sgd_step_matches_finite_differences():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((6, 2)), rng.integers(0, 2, 6)
    p = audit.ProbeModel(rng.standard_normal((2, 4)), rng.standard_normal(4), rng.standard_normal((4, 2)))
    before = [w.copy() for w in (p.w1, p.b1, p.w2)]
    lr = 1e-3
    audit._sgd_step(p, x, np.eye(2)[y], lr)
    h = 1e-6
    for w, w0 in zip((p.w1, p.b1, p.w2), before):
        step = (w0 - w) / lr
        ref = audit.ProbeModel(*(b.copy() for b in before))
        target = {id(p.w1): "w1", id(p.b1): "b1", id(p.w2): "w2"}[id(w)]
        num = np.zeros_like(w0)
        for idx in np.ndindex(w0.shape):
            for sign in (1, -1):
                arr = getattr(ref, target)
                arr[idx] += sign * h
                num[idx] += sign * audit.cross_entropy(ref, x, y) / (2 * h)
                arr[idx] -= sign * h
        np.testing.assert_allclose(step, num, rtol=1e-5, atol=1e-8)


def test_minibatch_and_standardize_paths():
    a, labels = clusters(2)
    mini = audit.AuditConfig(hidden_width=32, batch_size=16, epochs=20, lr=0.05)
    assert audit.unfairness(a, labels, mini).accuracy > 0.9
    # standardization removes the scale of the inputs
    std = audit.AuditConfig(hidden_width=32, standardize=True, epochs=50, lr=0.1)
    assert audit.unfairness(a * 1e3, labels, std).accuracy > 0.9


def test_deterministic():
    a, labels = clusters(3)
    r1 = audit.unfairness(a, labels, FAST)
    r2 = audit.unfairness(a, labels, FAST)
    assert r1 == r2


def test_degenerate_training_split_warns():
    a = np.arange(8.0)[:, None]
    labels = np.array([0, 0, 0, 0, 0, 0, 0, 1])
    found = False
    for seed in range(20):
        res = audit.unfairness(a, labels, audit.AuditConfig(hidden_width=4, epochs=1, seed=seed))
        if res.warnings:
            assert "degenerate" in res.warnings[0]
            found = True
    assert found


def test_input_validation():
    with pytest.raises(DimensionError):
        audit.unfairness(np.ones((4, 2)), [0, 1, 0])
    with pytest.raises(ValueError):
        audit.unfairness(np.ones((4, 2)), [0, 1, 2, 0])
    with pytest.raises(ValueError):
        audit.unfairness(np.ones((1, 2)), [0])
    with pytest.raises(ValueError):
        audit.AuditConfig(train_fraction=1.0)


def test_threshold_probe():
    np.testing.assert_array_equal(audit.threshold_probe(np.array([[0.0, 1], [2, 0], [-1, 0]])), [0, 1, 1])


def test_csv_row():
    res = audit.AuditResult(0.75, 0.25, 0.0, 3, 4)
    assert audit.AUDIT_CSV_HEADER.count(",") == res.csv_row("BCD", 0.1).count(",")
    assert res.csv_row("BCD", 0.1) == "BCD,0.1,0.75,0.25,0.0,4\n"
