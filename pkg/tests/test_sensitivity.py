import math

import numpy as np
import pytest

from tightsens._secular import secular_top, secular_top_batch
from tightsens.core import DegenerateInputError, RankZeroError, WeightedPointSet
from tightsens.evaluation import affine_sensitivity_closed_form
from tightsens.sensitivity import (
    ConditioningWarning,
    affine_sensitivities_all,
    affine_sensitivity,
    baseline_projection_sensitivities,
    iteration_cap,
    leverage_sensitivities,
    lift_config,
    lift_points,
    nonaffine_sensitivities_all,
    nonaffine_sensitivity,
    uniform_sensitivities,
)


def random_set(rng, n, d, spread=3.0, shift=0.0):
    pts = rng.normal(size=(n, d)) * rng.uniform(0.1, spread, size=d) + shift
    return WeightedPointSet(pts, rng.uniform(0.2, 3.0, size=n))


# --- leverage -----------------------------------------------------------------


def test_leverage_examples():
    sv = leverage_sensitivities(WeightedPointSet.unweighted(np.eye(3)))
    np.testing.assert_allclose(sv.values, 1.0)
    assert sv.total == pytest.approx(3)
    sv = leverage_sensitivities(WeightedPointSet.unweighted([[1, 0], [1, 0]]))
    np.testing.assert_allclose(sv.values, 0.5)
    assert sv.total == pytest.approx(1)
    with pytest.raises(RankZeroError):
        leverage_sensitivities(WeightedPointSet.unweighted(np.zeros((3, 2))))


def test_leverage_total_is_rank():
    rng = np.random.default_rng(0)
    sv = leverage_sensitivities(WeightedPointSet.unweighted(rng.normal(size=(100, 15))))
    assert abs(sv.total - 15) < 1e-8


# --- non-affine ---------------------------------------------------------------


def test_analytic_three_points():
    ps = WeightedPointSet.unweighted([[1, 0], [0, 1], [1, 1]])
    s, state = nonaffine_sensitivity(ps, 2, 1, 1e-3)
    assert 2 / 3 - 1e-12 <= s <= 2 / 3 + 1e-3 + 1e-9
    assert state.exit_reason == "leverage"


def test_identical_points():
    n = 5
    ps = WeightedPointSet.unweighted(np.tile([1.0, 2.0, -1.0], (n, 1)))
    for k in range(3):
        sv = nonaffine_sensitivities_all(ps, k, 1e-3)
        assert np.all(sv.values >= 1 / n - 1e-12)
        assert np.all(sv.values <= 1 / n + 1e-3 + 1e-12)


def test_identity_rows_hyperplane():
    sv = nonaffine_sensitivities_all(WeightedPointSet.unweighted(np.eye(4)), 3, 1e-3)
    np.testing.assert_allclose(sv.values, 1.0)
    assert sv.method == "leverage"


def test_two_point_hyperplane():
    sv = nonaffine_sensitivities_all(WeightedPointSet.unweighted([[1, 0], [0, 1]]), 1, 1e-3)
    np.testing.assert_allclose(sv.values, [1.0, 1.0])


def test_k_zero_is_norm_share():
    rng = np.random.default_rng(1)
    ps = random_set(rng, 12, 3)
    sv = nonaffine_sensitivities_all(ps, 0, 1e-3)
    share = ps.weights * np.sum(ps.points**2, axis=1)
    share /= share.sum()
    assert np.all(sv.values >= share - 1e-12)
    assert np.all(sv.values <= share + 1e-3 + 1e-12)


def test_zero_row_and_zero_weight():
    ps = WeightedPointSet([[0.0, 0.0, 0.0], [1.0, 2.0, 0.5], [0.3, -1.0, 2.0], [1.0, 1.0, 1.0]], [1, 1, 1, 0])
    sv, states = nonaffine_sensitivities_all(ps, 1, 1e-3, return_states=True)
    assert sv.values[0] == 0.0 and sv.values[3] == 0.0
    assert states[0].exit_reason == "zero_row"
    s, st = nonaffine_sensitivity(ps, 0, 1, 1e-3)
    assert s == 0.0 and st.iterations == 0
    with pytest.raises(DegenerateInputError):
        nonaffine_sensitivity(ps, 3, 1, 1e-3)


def test_argument_validation():
    ps = WeightedPointSet.unweighted(np.eye(3))
    with pytest.raises(ValueError):
        nonaffine_sensitivity(ps, 0, 3, 1e-3)
    with pytest.raises(ValueError):
        nonaffine_sensitivity(ps, 0, 1, 0.0)
    with pytest.raises(IndexError):
        nonaffine_sensitivity(ps, 5, 1, 1e-3)


def test_rank_deficient_caps_k():
    # rank 2 data in R^4 with k = 2: the query dimension is capped and leverage is exact
    rng = np.random.default_rng(2)
    base = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 4))
    ps = WeightedPointSet.unweighted(base)
    sv = nonaffine_sensitivities_all(ps, 2, 1e-3)
    lev = leverage_sensitivities(ps)
    np.testing.assert_allclose(sv.values, lev.values, atol=1e-12)


def test_monotone_history_and_cap():
    rng = np.random.default_rng(3)
    for _ in range(10):
        ps = random_set(rng, 25, 6)
        sv, states = nonaffine_sensitivities_all(ps, 2, 1e-3, return_states=True)
        for st in states:
            assert np.all(np.diff(st.history) >= -1e-12)
            assert st.iterations <= iteration_cap(6, 1e-3)
            X = st.X
            np.testing.assert_allclose(X.T @ X, np.eye(X.shape[1]), atol=1e-10)
            assert 0 <= st.gamma <= 1


def test_dense_and_secular_agree():
    rng = np.random.default_rng(4)
    for _ in range(5):
        ps = random_set(rng, 30, 6)
        a = nonaffine_sensitivities_all(ps, 2, 1e-4, solver="dense")
        b = nonaffine_sensitivities_all(ps, 2, 1e-4, solver="secular")
        np.testing.assert_allclose(a.values, b.values, atol=1e-10)


def test_parallel_matches_serial():
    rng = np.random.default_rng(5)
    ps = random_set(rng, 40, 5)
    a = nonaffine_sensitivities_all(ps, 2, 1e-3)
    b = nonaffine_sensitivities_all(ps, 2, 1e-3, parallelism=2)
    np.testing.assert_array_equal(a.values, b.values)


def test_range_and_total():
    rng = np.random.default_rng(6)
    ps = random_set(rng, 30, 5)
    sv = nonaffine_sensitivities_all(ps, 1, 1e-3)
    assert np.all((sv.values >= 0) & (sv.values <= 1))
    assert sv.total == pytest.approx(sv.values.sum(), rel=1e-12)


# --- secular solver -----------------------------------------------------------


def test_secular_matches_eigh_on_moderate_problem():
    rng = np.random.default_rng(7)
    for _ in range(20):
        r = int(rng.integers(2, 7))
        lam = np.sort(rng.uniform(0.5, 5.0, r))
        m = rng.normal(size=r)
        s = rng.uniform(0.05, 0.9)
        ell = int(rng.integers(1, r + 1))
        X = secular_top(lam, m, s, ell)
        G = np.outer(m, m) - s * np.diag(lam)
        vals = np.linalg.eigvalsh(G)[::-1]
        np.testing.assert_allclose(X.T @ X, np.eye(ell), atol=1e-12)
        assert np.trace(X.T @ G @ X) == pytest.approx(vals[:ell].sum(), abs=1e-10)


def test_secular_handles_ties_and_zero_entries():
    lam = np.array([1.0, 1.0, 2.0, 3.0])
    m = np.array([0.5, -0.5, 0.0, 1.0])
    G = np.outer(m, m) - 0.3 * np.diag(lam)
    top = np.linalg.eigvalsh(G)[::-1]
    for ell in (1, 2, 3, 4):
        X = secular_top(lam, m, 0.3, ell)
        assert np.trace(X.T @ G @ X) == pytest.approx(top[:ell].sum(), abs=1e-12)
    Xb = secular_top_batch(lam, np.vstack([m, m]), np.array([0.3, 0.3]), 2)
    assert np.trace(Xb[0].T @ G @ Xb[0]) == pytest.approx(top[:2].sum(), abs=1e-12)


def test_secular_zero_shift():
    lam = np.array([1.0, 2.0, 3.0])
    m = np.array([0.0, 1.0, 1.0])
    X = secular_top(lam, m, 0.0, 2)
    np.testing.assert_allclose(X.T @ X, np.eye(2), atol=1e-12)
    assert np.linalg.norm(m @ X) ** 2 == pytest.approx(2.0)


# --- lift and affine ----------------------------------------------------------


def test_lift_examples():
    lifted, cfg = lift_points(WeightedPointSet.unweighted(np.zeros((1, 3))), 0.05)
    assert cfg.r == 1.0
    np.testing.assert_array_equal(lifted.points, [[0, 0, 0, 1]])
    cfg = lift_config(WeightedPointSet([[1.0, 0.0]], [2.5]), 0.1)
    assert cfg.psi == pytest.approx(0.0025)
    assert cfg.r == pytest.approx(40001)
    lifted, cfg = lift_points(WeightedPointSet([[1.0, 0.0]], [2.5]), 1 / 12)
    assert lifted.points[0, -1] == cfg.r == pytest.approx(1 + 12**4 * 4)
    np.testing.assert_array_equal(lifted.weights, [2.5])
    with pytest.raises(ValueError):
        lift_points(WeightedPointSet.unweighted(np.eye(2)), 0.2)


def test_affine_pair_clamps_to_one():
    ps = WeightedPointSet.unweighted([[1.0, 2.0], [-1.0, -2.0]])
    sv = affine_sensitivities_all(ps, 0, 1e-3)
    np.testing.assert_allclose(sv.values, 1.0)


def test_affine_identical_points():
    n = 4
    ps = WeightedPointSet.unweighted(np.tile([1.0, -3.0], (n, 1)))
    sv = affine_sensitivities_all(ps, 0, 1e-3)
    assert np.all(sv.values >= 1 / n - 1e-12)
    assert np.all(sv.values <= min(1, 1 / n + 161e-3))


@pytest.mark.parametrize("eps", [1e-3, 1e-2, 1 / 12])
def test_affine_lift_matches_closed_form(eps):
    # lifted sensitivity (before the +80 eps) brackets the exact 1-mean sensitivity
    rng = np.random.default_rng(8)
    for _ in range(5):
        ps = random_set(rng, 12, 3, shift=2.0)
        exact = affine_sensitivity_closed_form(ps)
        sv, states = affine_sensitivities_all(ps, 0, eps, return_states=True)
        raw = np.array([max(st.history) for st in states])
        assert np.all(raw <= exact + 1e-9)
        assert np.all(raw >= exact - eps - 1e-9)
        assert np.all(sv.values >= exact - 1e-12)
        assert np.all(sv.values <= np.minimum(1, exact + 161 * eps) + 1e-12)


def test_affine_single_row_matches_batch():
    rng = np.random.default_rng(9)
    ps = random_set(rng, 10, 2, shift=1.0)
    sv = affine_sensitivities_all(ps, 0, 1e-3)
    assert affine_sensitivity(ps, 3, 0, 1e-3) == pytest.approx(sv.values[3], abs=1e-12)


def test_affine_general_k_reduces_to_centred_problem():
    # affine sensitivity = w/W + linear sensitivity of the weighted-centred rows (same k)
    rng = np.random.default_rng(10)
    for _ in range(3):
        ps = random_set(rng, 15, 4, shift=1.5)
        mu = ps.weighted_mean()
        centred = WeightedPointSet(ps.points - mu, ps.weights)
        ref = ps.weights / ps.weights.sum() + nonaffine_sensitivities_all(centred, 1, 1e-9).values - 1e-9
        _, states = affine_sensitivities_all(ps, 1, 1e-3, return_states=True)
        raw = np.array([max(st.history) for st in states])
        assert np.all(raw <= ref + 1e-8)
        assert np.all(raw >= ref - 1e-3 - 1e-8)


def test_affine_eps_warning_and_rejection():
    ps = WeightedPointSet.unweighted([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]])
    with pytest.warns(ConditioningWarning):
        affine_sensitivities_all(ps, 0, 1e-4)
    with pytest.raises(ValueError):
        affine_sensitivities_all(ps, 0, 0.1)


def test_affine_scale_invariance():
    rng = np.random.default_rng(11)
    ps = random_set(rng, 10, 3)
    a = affine_sensitivities_all(ps, 0, 1e-2).values
    b = affine_sensitivities_all(WeightedPointSet(ps.points * 37.0, ps.weights), 0, 1e-2).values
    np.testing.assert_allclose(a, b, atol=1e-9)


# --- baselines ----------------------------------------------------------------


def test_uniform():
    sv = uniform_sensitivities(WeightedPointSet.unweighted(np.ones((4, 2))))
    np.testing.assert_allclose(sv.values, 0.25)
    assert uniform_sensitivities(WeightedPointSet.unweighted([[1.0]])).values[0] == 1.0
    assert sv.total == pytest.approx(1.0)


def test_baseline_examples():
    # points on a line through the origin: residual term vanishes
    pts = np.outer(np.arange(1, 6), [1.0, 2.0])
    ps = WeightedPointSet.unweighted(pts)
    b = baseline_projection_sensitivities(ps, 1)
    lev = leverage_sensitivities(ps)
    np.testing.assert_allclose(b.values, lev.values, atol=1e-12)
    ident = WeightedPointSet.unweighted(np.tile([1.0, 1.0], (4, 1)))
    np.testing.assert_allclose(baseline_projection_sensitivities(ident, 0).values, 0.25)


@pytest.mark.parametrize("affine", [False, True])
def test_baseline_dominates_tight(affine):
    rng = np.random.default_rng(12)
    for _ in range(20):
        n = int(rng.integers(4, 25))
        d = int(rng.integers(2, 6))
        k = int(rng.integers(0, d))
        ps = random_set(rng, n, d, shift=1.0 if affine else 0.0)
        if rng.random() < 0.5:
            pts = ps.points.copy()
            pts[:2] *= 15
            ps = WeightedPointSet(pts, ps.weights)
        b = baseline_projection_sensitivities(ps, k, affine).values
        if affine:
            mu = ps.weighted_mean()
            centred = WeightedPointSet(ps.points - mu, ps.weights)
            try:
                t = ps.weights / ps.weights.sum() + nonaffine_sensitivities_all(centred, k, 1e-6).values
            except RankZeroError:
                continue
        else:
            t = nonaffine_sensitivities_all(ps, k, 1e-3).values
        eps = 1e-6 if affine else 1e-3
        assert np.all(b >= np.minimum(t, 1) - eps - 1e-9)


def test_iteration_cap_formula():
    assert iteration_cap(4, 1e-3) == 10 * 4 * math.ceil(math.log(1e3))
