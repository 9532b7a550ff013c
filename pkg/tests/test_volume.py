import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from metkit.normed_space import INF, NormedSpace, Subspace
from metkit.volume import (
    D_k,
    E_k,
    F_k,
    LinearMap,
    VolumeEnclosure,
    d_kT,
    operator_norm,
    restricted_min_norm,
    verify_inequalities,
    vol_k,
)

PS = (1.0, 2.0, INF)


def lm(M, p=2.0):
    return LinearMap.from_array(np.asarray(M, float), p)


def random_map(rng, d, kind="generic"):
    if kind == "rank1":
        return np.outer(rng.standard_normal(d), rng.standard_normal(d))
    if kind == "integer":
        return rng.integers(-3, 4, (d, d)).astype(float)
    return rng.standard_normal((d, d))


# -- vol_k and d_kT --------------------------------------------------------

def test_vol_examples():
    R3, R2 = NormedSpace(3, 2), NormedSpace(2, 2)
    assert vol_k(np.array([[1.0, 0, 0], [0, 2, 0]]).T, R3) == pytest.approx(2.0, abs=1e-15)
    assert vol_k(np.array([[1.0, 0], [1, 1]]).T, R2) == pytest.approx(1.0, abs=1e-15)
    v = np.array([[1.0, 0.3], [0.2, 1.0]]).T
    for p in PS:
        R = NormedSpace(2, p)
        assert vol_k(v * [2.0, 3.0], R) == pytest.approx(6 * vol_k(v, R), rel=1e-12)


def test_vol_is_order_dependent_in_lp():
    # successive distances are not symmetric in the vectors outside the Euclidean case
    v = np.array([[1.0, 0.0], [1.0, 1.0]]).T
    R = NormedSpace(2, 1.0)
    assert vol_k(v, R) == pytest.approx(1.0)
    assert vol_k(v[:, ::-1], R) == pytest.approx(2.0)


def test_vol_zero_for_dependent_vectors():
    for p in PS:
        assert vol_k(np.array([[1.0, 2.0], [2.0, 4.0]]), NormedSpace(2, p)) == 0.0


def test_vol_matches_oracle(rng):
    for t in range(150):
        p = PS[t % 3]
        d = int(rng.integers(2, 6))
        k = int(rng.integers(1, d + 1))
        V = rng.standard_normal((d, k))
        assert vol_k(V, NormedSpace(d, p)) == pytest.approx(oracles.volume(V, p), rel=1e-9)


def test_vol_rejects_mixed_spaces():
    with pytest.raises(ValueError):
        vol_k(np.ones((3, 2)), NormedSpace(2, 2))


def test_dkT_examples():
    T = lm(np.diag([3.0, 2.0, 1.0]))
    assert d_kT(T, np.eye(3)[:, :2]) == pytest.approx(6.0, rel=1e-15)
    assert d_kT(lm(np.zeros((3, 3))), np.eye(3)[:, :2]) == 0.0
    V = np.array([[1.0, 1, 0], [0, 1, 1]]).T
    for p in PS:
        assert d_kT(lm(np.eye(3), p), V) == vol_k(V, NormedSpace(3, p))
    with pytest.raises(ValueError):
        d_kT(T, np.ones((2, 1)))


# -- D_k, E_k, F_k examples --------------------------------------------------

DIAG = np.diag([3.0, 2.0, 1.0])


@pytest.mark.parametrize("mode", ["euclidean-exact", "optimize"])
def test_diag_examples(mode):
    T = lm(DIAG)
    assert D_k(T, 2, mode).lo == pytest.approx(6.0, rel=1e-12)
    assert E_k(T, 2, mode).lo == pytest.approx(6.0, rel=1e-12)
    assert F_k(T, 2, mode).lo == pytest.approx(2.0, rel=1e-12)
    if mode == "euclidean-exact":
        for f in (D_k, E_k, F_k):
            e = f(T, 2, mode)
            assert e.lo == e.hi


@pytest.mark.parametrize("p", PS)
def test_identity_examples(p):
    T = lm(np.eye(3), p)
    for k in (1, 2, 3):
        D = D_k(T, k)
        assert D.lo == pytest.approx(1.0, abs=1e-12) and D.hi >= 1.0 - 1e-12
        assert F_k(T, k).lo == pytest.approx(1.0, abs=1e-12)
    E = E_k(T, 1)
    assert E.lo == pytest.approx(1.0, abs=1e-12) and E.hi == pytest.approx(1.0, abs=1e-12)


def test_identity_D_upper_bound_is_one():
    # the enclosure for the identity must be pinned in the Euclidean and p=1/inf k=1 cases
    for p in PS:
        assert D_k(lm(np.eye(3), p), 1).hi == pytest.approx(1.0, abs=1e-12)
    assert D_k(lm(np.eye(3)), 3).hi == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("p", PS)
def test_zero_map(p):
    T = lm(np.zeros((3, 3)), p)
    for f in (D_k, E_k, F_k):
        e = f(T, 2)
        assert e.lo == 0.0 and e.hi == 0.0


@pytest.mark.parametrize("p", PS)
def test_rank_one_has_no_two_dim_expansion(p, rng):
    T = lm(random_map(rng, 3, "rank1"), p)
    assert F_k(T, 2).hi <= 1e-12
    assert D_k(T, 2).lo <= 1e-12


def test_mode_errors():
    T = lm(DIAG, 1.0)
    with pytest.raises(ValueError):
        D_k(T, 2, "euclidean-exact")
    with pytest.raises(ValueError):
        D_k(lm(DIAG), 4)
    with pytest.raises(ValueError):
        E_k(lm(DIAG), 0)
    with pytest.raises(ValueError):
        F_k(lm(np.eye(5), INF), 2, "net")
    with pytest.raises(ValueError):
        D_k(lm(DIAG), 1, "bogus")


def test_enclosure_invariants():
    with pytest.raises(AssertionError):
        VolumeEnclosure(2.0, 1.0, "optimize")
    with pytest.raises(AssertionError):
        VolumeEnclosure(1.0, 2.0, "euclidean-exact")
    e = VolumeEnclosure(1.0 + 1e-14, 1.0, "optimize")
    assert e.lo == e.hi


# -- Euclidean oracle ---------------------------------------------------------

def test_euclidean_optimize_matches_svd(rng):
    for t in range(40):
        d = int(rng.integers(2, 7))
        A = random_map(rng, d, ("generic", "integer")[t % 2])
        s = oracles.sigma(A)
        T = lm(A)
        for k in range(1, d + 1):
            prod = float(np.prod(s[:k]))
            # singular integer maps: the oracle value itself is roundoff, so floor at eps * s1^k
            tol = 1e-6 * prod + 1e-12 * s[0] ** k
            assert abs(D_k(T, k).lo - prod) <= tol
            assert abs(E_k(T, k).lo - prod) <= tol
            assert abs(F_k(T, k).lo - s[k - 1]) <= 1e-6 * s[k - 1] + 1e-12 * s[0]


@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.integers(1, 3))
def test_homogeneity(c, k):
    A = np.array([[1.0, 2.0, 0.5], [0.0, 1.5, -1.0], [0.3, 0.0, 2.0]])
    base = D_k(lm(A), k, "euclidean-exact").lo
    assert D_k(lm(c * A), k, "euclidean-exact").lo == pytest.approx(abs(c) ** k * base, rel=1e-9)


# -- polyhedral cases --------------------------------------------------------

@pytest.mark.parametrize("p", (1.0, INF))
def test_operator_norm_exact(p, rng):
    for _ in range(20):
        A = rng.standard_normal((4, 4))
        lo, hi, c = operator_norm(lm(A, p))
        assert lo == hi == pytest.approx(oracles.op_norm(A, p), rel=1e-12)
        assert np.linalg.norm(A @ c, ord=p) == pytest.approx(lo, rel=1e-12)


@pytest.mark.parametrize("p", (1.0, INF))
def test_E_enumeration_matches_brute_force(p, rng):
    from metkit.normed_space import ball_vertices
    q = 1.0 if p == INF else INF
    for _ in range(10):
        d = int(rng.integers(2, 4))
        A = rng.standard_normal((d, d))
        X = ball_vertices(np.eye(d), p)
        Th = ball_vertices(np.eye(d), q)
        for k in range(1, d + 1):
            e = E_k(lm(A, p), k)
            assert e.lo == e.hi
            assert e.lo == pytest.approx(oracles.brute_det_max(A, k, X, Th), rel=1e-10)


@pytest.mark.parametrize("p", PS)
def test_witnesses_reproduce_lower_ends(p, rng):
    for _ in range(10):
        A = rng.standard_normal((3, 3))
        T = lm(A, p)
        for k in (1, 2, 3):
            D = D_k(T, k)
            X = D.witness["vectors"]
            assert np.allclose(np.linalg.norm(X, ord=p, axis=0), 1.0)
            assert oracles.volume(A @ X, p) == pytest.approx(D.lo, rel=1e-8, abs=1e-12)
            E = E_k(T, k)
            X, Th = E.witness["vectors"], E.witness["functionals"]
            assert abs(np.linalg.det(Th.T @ A @ X)) == pytest.approx(E.lo, rel=1e-8, abs=1e-12)
            F = F_k(T, k)
            val, _ = restricted_min_norm(T, F.witness["frame"])
            assert val == pytest.approx(F.lo, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("p", (1.0, INF))
def test_F_lower_end_is_an_honest_infimum(p, rng):
    # no sampled unit vector in the witness frame may fall below lo
    for _ in range(10):
        A = rng.standard_normal((3, 3))
        F = F_k(lm(A, p), 2)
        frame = F.witness["frame"]
        c = rng.standard_normal((2, 4000))
        V = frame @ c
        ratios = np.linalg.norm(A @ V, ord=p, axis=0) / np.linalg.norm(V, ord=p, axis=0)
        assert ratios.min() >= F.lo * (1 - 1e-9)


@pytest.mark.parametrize("p", (1.0, INF))
def test_D_upper_end_dominates_samples(p, rng):
    for _ in range(5):
        A = rng.standard_normal((3, 3))
        D = D_k(lm(A, p), 2)
        for _ in range(300):
            X = rng.standard_normal((3, 2))
            X /= np.linalg.norm(X, ord=p, axis=0)
            assert oracles.volume(A @ X, p) <= D.hi * (1 + 1e-9)


@pytest.mark.parametrize("p", (1.0, INF))
def test_net_mode_encloses(p, rng):
    for d, k in ((2, 1), (2, 2), (3, 1)):
        T = lm(rng.standard_normal((d, d)), p)
        opt = E_k(T, k)
        net = E_k(T, k, "net", net_h=0.1)
        assert net.lo <= opt.hi * (1 + 1e-9) and opt.lo <= net.hi * (1 + 1e-9)
        Dn = D_k(T, k, "net", net_h=0.1)
        assert Dn.lo <= Dn.hi


def test_net_mode_refuses_oversized_nets():
    with pytest.raises(ValueError):
        D_k(lm(np.eye(3), INF), 2, "net", net_h=0.1)


def test_dual_map_is_transpose():
    A = np.array([[1.0, 2.0], [0.0, 3.0]])
    T = lm(A, 1.0)
    Ts = T.dual()
    np.testing.assert_array_equal(Ts.A, A.T)
    assert Ts.p == INF
    assert operator_norm(T)[0] == pytest.approx(operator_norm(Ts)[0], rel=1e-15)


# -- restriction ---------------------------------------------------------------

def test_restriction_to_subspace():
    T = lm(DIAG)
    V = Subspace(NormedSpace(3, 2), np.eye(3)[:, 1:])
    TV = T.restrict(V)
    assert TV.m == 2
    assert D_k(TV, 2).lo == pytest.approx(2.0, rel=1e-12)
    assert F_k(TV, 1).lo == pytest.approx(2.0, rel=1e-12)


# -- inequality suite ----------------------------------------------------------

def test_suite_diag_all_pass():
    T = lm(DIAG)
    V = Subspace(NormedSpace(3, 2), np.eye(3)[:, 1:])
    rep = verify_inequalities(T, T, V, 3)
    assert rep.passed, rep.failures()
    names = {c.name for c in rep.checks}
    assert {"submultiplicativity", "expansion_implies_volume", "det_recursion_lower",
            "finite_codimension_split", "adjoint_norm_equality"} <= names
    json.dumps(rep.to_json())


def test_suite_expanding_subspace():
    T = lm(np.diag([5.0, 5.0, 0.1]))
    rep = verify_inequalities(T, T, None, 2)
    assert rep.passed
    assert D_k(T, 2).lo >= 25 * (1 - 1e-12)
    chk = [c for c in rep.checks if c.name == "expansion_implies_volume" and c.k == 2][0]
    assert chk.lhs == pytest.approx(25.0, rel=1e-12) and chk.passed


def test_suite_primal_dual_norms_equal(rng):
    for p in PS:
        rep = verify_inequalities(lm(rng.standard_normal((3, 3)), p), lm(np.eye(3), p), None, 1)
        chk = [c for c in rep.checks if c.name == "adjoint_norm_equality"][0]
        assert chk.passed and chk.witnesses["ratio"] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("p", PS)
def test_suite_random(p, rng):
    for _ in range(4):
        d = int(rng.integers(2, 5))
        T = lm(rng.standard_normal((d, d)), p)
        S = lm(rng.standard_normal((d, d)), p)
        V = Subspace(NormedSpace(d, p), rng.standard_normal((d, d - 1)))
        rep = verify_inequalities(T, S, V, min(3, d))
        assert rep.passed, [(c.name, c.k, c.lhs, c.rhs) for c in rep.failures()]


def test_suite_negative_control():
    # shrinking every right-hand side must make tight inequalities fail
    T = lm(DIAG)
    rep = verify_inequalities(T, T, None, 2, slack=0.5)
    assert not rep.passed
    assert any(c.name == "volume_le_det" for c in rep.failures())


def test_suite_rejects_incompatible_maps():
    with pytest.raises(ValueError):
        verify_inequalities(lm(np.eye(2)), lm(np.eye(3)), None, 1)
    assert math.isfinite(D_k(lm(np.eye(2)), 1).hi)
