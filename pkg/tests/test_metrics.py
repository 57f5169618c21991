import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from callpipe.metrics import MetricError, compute_metrics, f1_score, one_vs_rest, roc_auc, youden_threshold

# (precision, recall, printed F1) from the benchmark table
BENCHMARK_ROWS = [
    (0.849, 0.603, 0.705), (0.228, 0.695, 0.344), (0.547, 0.877, 0.67),
    (0.847, 0.486, 0.618), (0.732, 0.761, 0.746), (0.938, 0.728, 0.82),
    (0.84, 0.47, 0.6), (0.875, 0.981, 0.925),
]


def decimals(printed: float) -> int:
    text = repr(printed)
    return len(text.split(".")[1]) if "." in text else 0


def mann_whitney(labels, scores):
    y, s = np.asarray(labels), np.asarray(scores, dtype=float)
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def brute_confusion(labels, scores, t):
    tp = fp = fn = tn = 0
    for y, s in zip(labels, scores):
        if s >= t:
            tp += y == 1
            fp += y == 0
        else:
            fn += y == 1
            tn += y == 0
    return tp, fp, fn, tn


@pytest.mark.parametrize("p,r,printed", BENCHMARK_ROWS)
def test_f1_matches_table(p, r, printed):
    assert abs(round(f1_score(p, r), decimals(printed)) - printed) <= 0.005


def test_f1_examples():
    assert f1_score(0.547, 0.877) == pytest.approx(0.674, abs=5e-4)
    assert f1_score(0.732, 0.761) == pytest.approx(0.746, abs=5e-4)
    assert f1_score(0.0, 0.0) == 0.0
    # the precision-1 / recall-0.009 row cannot give its printed 0.6 as a harmonic mean
    assert f1_score(1.0, 0.009) == pytest.approx(0.0178, abs=1e-4)


def test_perfect_predictions():
    m = compute_metrics([0, 1, 1, 0], [0.1, 0.9, 0.8, 0.2])
    assert (m.accuracy, m.precision, m.recall, m.f1, m.auc) == (1, 1, 1, 1, 1)


def test_auc_examples():
    pts, auc = roc_auc([1, 1, 0, 0], [0.9, 0.8, 0.3, 0.1])
    assert auc == 1.0 and pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert roc_auc([1, 1, 0, 0], [0.8, 0.4, 0.6, 0.2])[1] == 0.75
    assert roc_auc([1, 0, 1, 0], [0.5] * 4)[1] == 0.5


def test_auc_errors():
    with pytest.raises(MetricError):
        roc_auc([1, 1], [0.2, 0.3])
    with pytest.raises(MetricError):
        compute_metrics([0, 2], [0.1, 0.2])


def test_roc_monotone(rng):
    y = rng.integers(0, 2, 200)
    y[:2] = [0, 1]
    pts, _ = roc_auc(y, rng.random(200))
    f, t = np.array(pts).T
    assert np.all(np.diff(f) >= 0) and np.all(np.diff(t) >= 0)


def random_instance(rng, n):
    y = rng.integers(0, 2, n)
    # coarse score grid so ties are common
    return y, np.round(rng.random(n), int(rng.integers(1, 4)))


def test_auc_mann_whitney_oracle():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 1000:
        n = int(rng.integers(2, 201))
        y, s = random_instance(rng, n)
        if y.min() == y.max():
            continue
        assert abs(roc_auc(y, s)[1] - mann_whitney(y, s)) <= 1e-9
        checked += 1


def test_compute_metrics_brute_force():
    rng = np.random.default_rng(7)
    for n in list(range(1, 60)) + [200, 500, 1000]:
        y = rng.integers(0, 2, n)
        s = np.round(rng.random(n), 2)
        t = float(rng.choice([0.5, 0.0, 1.0, s[0]]))
        tp, fp, fn, tn = brute_confusion(y, s, t)
        m = compute_metrics(y, s, t)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        assert m.accuracy == (tp + tn) / n
        assert (m.precision, m.recall) == (p, r)
        assert m.f1 == pytest.approx(2 * p * r / (p + r) if p + r else 0.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=80), st.floats(0, 1))
def test_metrics_in_unit_interval(pairs, t):
    y, s = zip(*pairs)
    m = compute_metrics(y, s, t)
    for v in (m.accuracy, m.precision, m.recall, m.f1, m.auc):
        assert 0.0 <= v <= 1.0 and np.isfinite(v)


def test_youden_selects_separating_threshold():
    y = [0, 0, 0, 1, 1]
    s = [0.1, 0.2, 0.35, 0.4, 0.9]
    t = youden_threshold(y, s)
    assert t == 0.4
    assert compute_metrics(y, s, t).accuracy == 1.0


def test_one_vs_rest():
    probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.7, 0.2, 0.1]])
    out = one_vs_rest([0, 1, 2, 0], probs, ["background", "a", "b"])
    assert set(out) == {"background", "a", "b"}
    assert all(v["auc"] == 1.0 for v in out.values())
