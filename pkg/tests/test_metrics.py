import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptcal.metrics import (
    BinningConfig,
    TemperatureScaler,
    ace,
    accuracy,
    calibration_report,
    ece,
    equal_mass_groups,
    fit_temperature,
    mce,
    nll,
    nll_at_temperature,
    reliability_bins,
    report_from_logits,
    softmax,
)
from promptcal.metrics import BinStat

from conftest import loop_softmax, random_labeled


# -- brute-force oracles -------------------------------------------------------


def oracle_top1(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best, row[best]


def oracle_equal_width_bin(conf, n_bins):
    # bin b (1-based) covers ((b-1)/B, b/B]; 0 joins bin 1
    for b in range(1, n_bins + 1):
        if conf <= b / n_bins:
            return b - 1
    return n_bins - 1


def oracle_ece_mce(probs, labels, n_bins):
    buckets = {}
    for row, y in zip(probs.tolist(), labels.tolist()):
        pred, conf = oracle_top1(row)
        buckets.setdefault(oracle_equal_width_bin(conf, n_bins), []).append((conf, pred == y))
    n = len(labels)
    total, worst = 0.0, 0.0
    for items in buckets.values():
        acc = sum(c for _, c in items) / len(items)
        conf = sum(p for p, _ in items) / len(items)
        total += len(items) / n * abs(acc - conf)
        worst = max(worst, abs(acc - conf))
    return total, worst


def oracle_ace(probs, labels, n_bins):
    confs = []
    for i, (row, y) in enumerate(zip(probs.tolist(), labels.tolist())):
        pred, conf = oracle_top1(row)
        confs.append((conf, i, pred == y))
    confs.sort(key=lambda t: (t[0], t[2], t[1]))
    n = len(confs)
    base, extra = divmod(n, n_bins)
    out, start = 0.0, 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        chunk = confs[start:start + size]
        start += size
        if chunk:
            acc = sum(c for _, _, c in chunk) / size
            conf = sum(p for p, _, _ in chunk) / size
            out += size / n * abs(acc - conf)
    return out


def oracle_nll(probs, labels):
    return sum(-math.log(max(row[y], 1e-300)) for row, y in zip(probs.tolist(), labels.tolist())) / len(labels)


# -- softmax ---------------------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax([[0.0, 0.0]]), [[0.5, 0.5]])


def test_softmax_ln2():
    np.testing.assert_allclose(softmax([[math.log(2.0), 0.0]]), [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_softmax_matches_naive_oracle(rng):
    z = rng.normal(size=(100, 7))
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(p, [loop_softmax(r) for r in z.tolist()], rtol=0, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite logit"):
        softmax([[0.0, np.nan]])


def test_softmax_large_logits_stable():
    p = softmax([[1000.0, 0.0]])
    assert np.all(np.isfinite(p))
    assert p[0, 0] == 1.0


# -- reliability bins --------------------------------------------------------------


def test_bins_perfect_predictions():
    bins = reliability_bins([[1.0, 0.0], [0.0, 1.0]], [0, 1], BinningConfig(10))
    nonempty = [b for b in bins if b.count]
    assert len(nonempty) == 1
    b = nonempty[0]
    assert (b.lower, b.upper, b.count, b.accuracy, b.mean_confidence) == (0.9, 1.0, 2, 1.0, 1.0)


def test_bins_single_wrong_sample():
    bins = reliability_bins([[0.6, 0.4]], [1], BinningConfig(10))
    nonempty = [b for b in bins if b.count]
    assert len(nonempty) == 1
    b = nonempty[0]
    assert (b.lower, b.upper, b.count, b.accuracy, b.mean_confidence) == (0.5, 0.6, 1, 0.0, 0.6)


def test_empty_bins_flagged_absent():
    bins = reliability_bins([[0.6, 0.4]], [1], BinningConfig(10))
    empty = [b for b in bins if b.count == 0]
    assert len(empty) == 9
    assert all(b.accuracy is None and b.mean_confidence is None and b.gap is None for b in empty)
    assert empty[0].to_dict()["accuracy"] is None


def test_bins_match_per_sample_oracle(rng):
    z, y = random_labeled(rng, 1000, 5)
    p = softmax(z)
    bins = reliability_bins(p, y, BinningConfig(15))
    expect = np.zeros(15, dtype=int)
    for row in p.tolist():
        expect[oracle_equal_width_bin(oracle_top1(row)[1], 15)] += 1
    assert [b.count for b in bins] == expect.tolist()


def test_bin_boundaries_are_right_closed():
    # confidence exactly 0.6 goes to (0.5, 0.6], not (0.6, 0.7]
    bins = reliability_bins([[0.6, 0.4]], [0], BinningConfig(10))
    assert bins[5].count == 1


def test_empty_input_rejected():
    with pytest.raises(ValueError, match="no samples"):
        reliability_bins(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_probs_must_be_stochastic():
    with pytest.raises(ValueError):
        reliability_bins([[0.7, 0.7]], [0])


def test_top1_ties_lowest_index():
    bins = reliability_bins([[0.5, 0.5]], [0], BinningConfig(10))
    assert [b for b in bins if b.count][0].accuracy == 1.0


# -- ECE / MCE / ACE ---------------------------------------------------------------


def test_ece_single_wrong_sample():
    bins = reliability_bins([[0.6, 0.4]], [1], BinningConfig(10))
    assert ece(bins, 1) == 0.6


def test_ece_all_correct_confident():
    p = np.array([[1.0, 0.0, 0.0]] * 5)
    bins = reliability_bins(p, [0] * 5)
    assert ece(bins, 5) == 0.0


def test_mce_equals_ece_single_bin():
    bins = reliability_bins([[0.6, 0.4], [0.58, 0.42]], [1, 0], BinningConfig(10))
    assert mce(bins, 2) == ece(bins, 2)


def test_ece_mce_direct_formula():
    bins = [BinStat(0.5, 0.6, 90, 0.55, 0.65), BinStat(0.9, 1.0, 10, 0.95, 0.65)]
    assert mce(bins, 100) == pytest.approx(0.3, abs=1e-15)
    assert ece(bins, 100) == pytest.approx(0.12, abs=1e-15)


def test_ece_requires_samples():
    with pytest.raises(ValueError):
        ece([], 0)


@pytest.mark.parametrize("case", range(20))
def test_ece_mce_ace_nll_match_oracles(case):
    rng = np.random.default_rng(1000 + case)
    n = int(rng.integers(1, 2001))
    k = int(rng.integers(2, 11))
    z, y = random_labeled(rng, n, k, scale=float(rng.uniform(0.5, 6)))
    p = softmax(z)
    nb = int(rng.integers(1, 21))
    bins = reliability_bins(p, y, BinningConfig(nb))
    e_or, m_or = oracle_ece_mce(p, y, nb)
    assert abs(ece(bins, n) - e_or) <= 1e-12
    assert abs(mce(bins, n) - m_or) <= 1e-12
    assert abs(ace(p, y, nb) - oracle_ace(p, y, nb)) <= 1e-12
    assert abs(nll(p, y) - oracle_nll(p, y)) <= 1e-12


def test_ace_matches_chunk_oracle_500(rng):
    z, y = random_labeled(rng, 500, 4)
    p = softmax(z)
    assert abs(ace(p, y, 15) - oracle_ace(p, y, 15)) <= 1e-12


def test_equal_mass_sizes_differ_by_at_most_one():
    for n in (1, 7, 15, 16, 101):
        sizes = [g.size for g in equal_mass_groups(np.linspace(0, 1, n), 15)]
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == n


def test_equal_mass_ties_keep_index_order():
    conf = np.array([0.7, 0.7, 0.7, 0.7])
    groups = equal_mass_groups(conf, 2)
    assert groups[0].tolist() == [0, 1] and groups[1].tolist() == [2, 3]


def test_equal_mass_ties_put_errors_first():
    conf = np.array([0.7, 0.7, 0.7, 0.7])
    groups = equal_mass_groups(conf, 2, correct=np.array([1.0, 0.0, 1.0, 0.0]))
    assert groups[0].tolist() == [1, 3] and groups[1].tolist() == [0, 2]


# -- NLL ---------------------------------------------------------------------------


def test_nll_uniform():
    assert nll(np.full((3, 4), 0.25), [0, 1, 2]) == pytest.approx(math.log(4), abs=1e-15)


def test_nll_certain():
    assert nll([[0.0, 1.0]], [1]) == 0.0


def test_nll_clamps_zero_probability():
    assert nll([[1.0, 0.0]], [1]) == pytest.approx(-math.log(1e-300))


def test_nll_loop_oracle(rng):
    z, y = random_labeled(rng, 300, 6)
    p = softmax(z)
    assert abs(nll(p, y) - oracle_nll(p, y)) <= 1e-12


# -- properties ----------------------------------------------------------------------


logit_mats = st.integers(1, 60).flatmap(
    lambda n: st.integers(2, 8).flatmap(
        lambda k: st.tuples(
            arrays(np.float64, (n, k), elements=st.floats(-20, 20, allow_nan=False)),
            arrays(np.int64, (n,), elements=st.integers(0, k - 1)),
            st.permutations(list(range(n))),
        )
    )
)


@settings(max_examples=60, deadline=None)
@given(logit_mats)
def test_metrics_permutation_invariant_and_ece_le_mce(data):
    z, y, perm = data
    r1 = report_from_logits(z, y)
    perm = np.array(perm)
    r2 = report_from_logits(z[perm], y[perm])
    assert (r1.ece, r1.mce, r1.ace, r1.nll, r1.accuracy) == (r2.ece, r2.mce, r2.ace, r2.nll, r2.accuracy)
    assert r1.ece <= r1.mce + 1e-15
    assert 0.0 <= r1.ece <= 1.0


@settings(max_examples=40, deadline=None)
@given(logit_mats)
def test_ece_invariant_to_relabeling_nonpredicted(data):
    z, y, _ = data
    p = softmax(z)
    pred = np.argmax(p, axis=1)
    k = p.shape[1]
    # move every wrong label to another wrong class; correctness pattern unchanged
    y2 = y.copy()
    for i in range(len(y)):
        if y[i] != pred[i] and k > 2:
            choices = [c for c in range(k) if c != pred[i]]
            y2[i] = choices[(choices.index(y[i]) + 1) % len(choices)]
    b1 = reliability_bins(p, y)
    b2 = reliability_bins(p, y2)
    assert ece(b1, len(y)) == ece(b2, len(y))


@settings(max_examples=40, deadline=None)
@given(logit_mats, st.floats(0.2, 5.0))
def test_monotone_transform_keeps_accuracy(data, t):
    z, y, _ = data
    assert accuracy(softmax(z), y) == accuracy(softmax(z / t), y)


def test_perfectly_calibrated_bins_give_zero_ece():
    # 10 samples at confidence 0.8, 8 correct
    p = np.array([[0.8, 0.2]] * 10)
    y = np.array([0] * 8 + [1] * 2)
    assert ece(reliability_bins(p, y), 10) == pytest.approx(0.0, abs=1e-15)


def test_report_json_shape():
    d = calibration_report([[0.6, 0.4]], [1]).to_dict()
    assert set(d) == {"ece", "mce", "ace", "nll", "accuracy", "mean_confidence", "bins"}
    assert set(d["bins"][0]) == {"lower", "upper", "count", "mean_confidence", "accuracy"}
    pct = calibration_report([[0.6, 0.4]], [1]).to_dict(percent=True)
    assert pct["ece"] == pytest.approx(60.0)


# -- temperature scaling ---------------------------------------------------------------


def grid_temperature(z, y, step=1e-4):
    grid = np.arange(-5.0, 5.0 + step / 2, step)
    zy = z[np.arange(len(y)), y]
    best, best_val = None, np.inf
    for chunk in np.array_split(grid, 50):
        t = np.exp(chunk)[:, None, None]
        s = z[None] / t
        m = s.max(axis=2, keepdims=True)
        lse = (m[..., 0] + np.log(np.exp(s - m).sum(axis=2)))
        vals = (lse - zy[None] / t[..., 0]).mean(axis=1)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best, best_val = chunk[j], vals[j]
    return math.exp(best)


def test_temperature_boundary_all_correct():
    fit = fit_temperature(np.array([[10.0, 0.0], [0.0, 10.0]]), np.array([0, 1]))
    assert fit.boundary
    assert fit.temperature == math.exp(-5.0)


def test_temperature_one_is_identity(rng):
    z, _ = random_labeled(rng, 10, 3)
    np.testing.assert_array_equal(softmax(z / 1.0), softmax(z))


@pytest.mark.parametrize("seed", range(4))
def test_temperature_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    z, y = random_labeled(rng, 200, 5, scale=4.0)
    z[np.arange(100), y[:100]] += 3.0  # half of the batch leans correct
    fit = fit_temperature(z, y)
    assert not fit.boundary
    assert abs(fit.temperature - grid_temperature(z, y)) < 1e-3
    assert fit.nll_after < nll_at_temperature(z, y, 1.0)


def test_temperature_deterministic(rng):
    z, y = random_labeled(rng, 50, 3)
    assert fit_temperature(z, y) == fit_temperature(z, y)


def test_scaler_estimator_roundtrip(rng):
    z, y = random_labeled(rng, 120, 4)
    est = TemperatureScaler().fit(z, y)
    assert est.temperature_ == fit_temperature(z, y).temperature
    np.testing.assert_allclose(est.predict_proba(z).sum(axis=1), 1.0)
    np.testing.assert_array_equal(est.predict(z), np.argmax(z, axis=1))
    assert est.get_params() == {"log_t_bounds": (-5.0, 5.0), "n_iter": 200}
