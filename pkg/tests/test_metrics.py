import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from reasonuq import metrics as M


def test_rejection_curve_two_points():
    c = M.rejection_curve([0.9, 0.1], [1, 0])
    assert c.x.tolist() == [0.0, 0.5, 1.0]
    assert c.y.tolist() == [0.5, 0.0, 0.0]


def test_rejection_curve_all_correct_is_flat_zero():
    assert M.rejection_curve([0.3, 0.2, 0.9], [1, 1, 1]).y.tolist() == [0, 0, 0, 0]


def test_rejection_curve_constant_confidence_is_base_error():
    y = M.rejection_curve([0.5] * 4, [1, 0, 0, 1]).y
    assert y.tolist() == [0.5, 0.5, 0.5, 0.5, 0.0]


def test_rejection_curve_needs_two():
    with pytest.raises(M.MetricError):
        M.rejection_curve([0.5], [1])


def test_prr_boundaries():
    assert M.prr([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert M.prr([0.3] * 4, [1, 0, 1, 0]) == 0.0
    assert M.prr([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(M.PrrUndefined):
        M.prr([0.1, 0.2], [1, 1])
    with pytest.raises(M.PrrUndefined):
        M.prr([0.1, 0.2], [0, 0])


def test_generalized_risk_curve_endpoints():
    c = M.generalized_risk_curve([0.9, 0.4, 0.3, 0.8], [1, 0, 0, 1])
    assert c.y[0] == 0.0 and c.y[-1] == 0.5
    assert c.y.tolist() == [0, 0, 0, 0.25, 0.5]


def test_augrc_examples():
    assert M.augrc([0.9, 0.1], [1, 0]) == 0.125
    assert M.augrc([0.2, 0.4, 0.1], [1, 1, 1]) == 0.0


def test_aurc_examples():
    assert M.aurc([0.2, 0.4, 0.1], [1, 1, 1]) == 0.0
    assert M.aurc([0.2, 0.4, 0.1], [0, 0, 0]) == 1.0
    # risk at coverage 0, 1/2, 1 is 0, 0, 1/2 under the first-accepted convention
    assert M.aurc([0.9, 0.1], [1, 0]) == 0.125


def test_spearman_examples():
    assert M.spearman([1, 2, 3, 4], [2, 5, 7, 9]) == pytest.approx(1.0)
    assert M.spearman([0.9, 0.8, 0.1], [1, 1, 0]) == pytest.approx(0.8660254, abs=1e-7)
    with pytest.raises(M.CorrelationUndefined):
        M.spearman([0.1, 0.2, 0.3], [1, 1, 1])


def test_partial_spearman_examples():
    x = [3, 1, 4, 1, 5, 9]
    y = [2, 7, 1, 8, 2, 8]
    assert M.partial_spearman(x, y, [1] * 6) == M.spearman(x, y)
    assert M.partial_spearman(x, x, [0, 1, 0, 1, 1, 0]) == pytest.approx(1.0)
    z = [0, 1, 1, 0, 1, 0]
    assert M.partial_spearman(x, y, z) == pytest.approx(oracles.partial_spearman(x, y, [z]), abs=1e-12)


def test_partial_spearman_degenerate_design():
    z = np.array([[0, 0], [1, 1], [0, 0], [1, 1], [0, 0], [1, 1]], dtype=float)
    with pytest.raises(M.DegenerateDesign):
        M.partial_spearman([1, 2, 3, 4, 5, 6], [6, 1, 4, 2, 5, 3], z)


def test_fisher_examples():
    r, (lo, hi) = M.fisher_aggregate([(0.0, 103, 0)])
    assert r == 0.0 and lo == pytest.approx(-0.194, abs=1e-3) and hi == pytest.approx(0.194, abs=1e-3)
    r, (lo, hi) = M.fisher_aggregate([(0.5, 103, 0)])
    assert r == pytest.approx(0.5)
    assert (lo, hi) == pytest.approx((math.tanh(math.atanh(0.5) - 0.196), math.tanh(math.atanh(0.5) + 0.196)))
    r1, ci1 = M.fisher_aggregate([(0.3, 50, 1)])
    r3, ci3 = M.fisher_aggregate([(0.3, 50, 1)] * 3)
    assert r3 == pytest.approx(r1) and ci3[1] - ci3[0] < ci1[1] - ci1[0]
    with pytest.raises(M.MetricError):
        M.fisher_aggregate([(1.0, 10, 0)])


def test_evaluate_all_correct():
    m = M.evaluate([0.1, 0.5, 0.9], [1, 1, 1])
    assert m.augrc == 0.0 and m.prr is None and m.spearman is None and m.accuracy == 1.0


def test_evaluate_counts_ties():
    m = M.evaluate([0.1, 0.1, 0.5, 0.9, 0.9, 0.9], [1, 0, 1, 0, 1, 1])
    assert (m.n_tie_blocks, m.n_tied) == (3, 5)


# -- oracle comparisons -----------------------------------------------------------

conf_lists = st.lists(st.integers(0, 4), min_size=2, max_size=7)


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_tie_averaging_matches_permutation_brute_force(data):
    conf = data.draw(conf_lists)
    corr = data.draw(st.lists(st.sampled_from([0, 0.5, 1]), min_size=len(conf), max_size=len(conf)))
    got = M.accepted_loss(conf, 1 - np.asarray(corr, float))
    want = oracles.brute_force_accepted_loss(conf, corr)
    assert got == pytest.approx([float(w) for w in want], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_metrics_match_exact_oracle(data):
    n = data.draw(st.integers(2, 25))
    conf = data.draw(st.lists(st.integers(0, 6), min_size=n, max_size=n))
    corr = data.draw(st.lists(st.sampled_from([0, 1, 1 / 3]), min_size=n, max_size=n))
    assert M.augrc(conf, corr) == pytest.approx(float(oracles.augrc(conf, corr)), abs=1e-12)
    assert M.aurc(conf, corr) == pytest.approx(float(oracles.aurc(conf, corr)), abs=1e-12)
    try:
        got = M.prr(conf, corr)
    except M.PrrUndefined:
        assert len(set(corr)) == 1
        return
    assert got == pytest.approx(float(oracles.prr(conf, corr)), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_curves_permutation_invariant(data):
    n = data.draw(st.integers(2, 15))
    conf = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    corr = data.draw(st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n))
    perm = data.draw(st.permutations(range(n)))
    pc, pk = [conf[i] for i in perm], [corr[i] for i in perm]
    assert M.augrc(conf, corr) == pytest.approx(M.augrc(pc, pk), abs=1e-15)
    assert M.aurc(conf, corr) == pytest.approx(M.aurc(pc, pk), abs=1e-15)
    np.testing.assert_allclose(M.rejection_curve(conf, corr).y, M.rejection_curve(pc, pk).y, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_augrc_between_perfect_and_inverted(data):
    n = data.draw(st.integers(2, 20))
    conf = data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
    corr = data.draw(st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n))
    c = np.asarray(corr, float)
    a = M.augrc(conf, corr)
    assert M.augrc(c, c) - 1e-12 <= a <= M.augrc(-c, c) + 1e-12
    assert a <= M.aurc(conf, corr) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_spearman_and_prr_share_sign_on_separable_rankings(data):
    n_ok = data.draw(st.integers(1, 10))
    n_bad = data.draw(st.integers(1, 10))
    conf = data.draw(st.lists(st.floats(0, 1), min_size=n_ok + n_bad, max_size=n_ok + n_bad, unique=True))
    conf = sorted(conf, reverse=True)
    corr = [1] * n_ok + [0] * n_bad
    assert M.spearman(conf, corr) > 0 and M.prr(conf, corr) > 0
    flipped = [1 - c for c in corr]
    assert M.spearman(conf, flipped) < 0 and M.prr(conf, flipped) < 0


def test_spearman_and_prr_can_disagree_on_weak_signal():
    # tie-free instance where the rank correlation is positive but PRR is negative
    conf = [0.625, 0.375, 0.0, 0.25, 0.5, 0.75, 1.0]
    corr = [0, 1, 0, 0, 1, 1, 0]
    assert M.spearman(conf, corr) == pytest.approx(oracles.spearman(conf, corr), abs=1e-12)
    assert M.prr(conf, corr) == pytest.approx(float(oracles.prr(conf, corr)), abs=1e-12)
    assert M.spearman(conf, corr) > 0 > M.prr(conf, corr)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_spearman_matches_oracle_with_ties(data):
    n = data.draw(st.integers(4, 30))
    x = data.draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    y = data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    z = data.draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    assert M.spearman(x, y) == pytest.approx(oracles.spearman(x, y), abs=1e-9)
    if len(set(z)) < 2:
        return
    try:
        want = oracles.partial_spearman(x, y, [z])
    except (ZeroDivisionError, ValueError):
        return
    assert M.partial_spearman(x, y, z) == pytest.approx(want, abs=1e-9)
