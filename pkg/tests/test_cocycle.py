import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metkit.cocycle import (
    BaseProcess,
    Generator,
    ScaledProduct,
    Trajectory,
    cocycle_product,
    compound,
    dual_base,
    dual_cocycle,
    estimate_spectrum,
    kappa_upper,
    resolve_workers,
    tempered_bound_series,
    temperedness_diagnostic,
    trajectory,
)
from metkit.normed_space import INF

J = np.array([[2.0, 1.0], [0.0, 1.0]])
DA, DB = np.diag([2.0, 1 / 3]), np.diag([4.0, 1 / 5])
FIXED = BaseProcess("fixed")


def rot(t):
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


# -- base processes -------------------------------------------------------

def test_fixed_trajectory():
    t = trajectory(FIXED, 5)
    assert list(t.symbols) == [0] * 5
    assert t.two_sided and list(t.window(-3, 3)) == [0, 0, 0]


def test_bernoulli_is_reproducible():
    b = BaseProcess("bernoulli", (0.5, 0.5), seed=123)
    t1, t2 = trajectory(b, 200), trajectory(b, 200)
    np.testing.assert_array_equal(t1.symbols, t2.symbols)
    np.testing.assert_array_equal(t1.past, t2.past)
    t3 = trajectory(b.with_seed(124), 200)
    assert not np.array_equal(t1.symbols, t3.symbols)
    assert set(np.unique(t1.symbols)) == {0, 1}


def test_markov_alternating():
    m = BaseProcess("markov", transition=((0.0, 1.0), (1.0, 0.0)), start=0, seed=1)
    t = trajectory(m, 8)
    assert list(t.symbols) == [0, 1, 0, 1, 0, 1, 0, 1]
    # the backward extension alternates too: step -1 is the other symbol
    assert [t.symbol_at(i) for i in (-1, -2, -3)] == [1, 0, 1]


def test_markov_stationary_and_reversal():
    P = np.array([[0.9, 0.1], [0.3, 0.7]])
    m = BaseProcess("markov", transition=tuple(map(tuple, P)), seed=3)
    pi = m.stationary()
    np.testing.assert_allclose(pi @ P, pi, atol=1e-14)
    np.testing.assert_allclose(pi, [0.75, 0.25], atol=1e-12)
    R = m.reversed_transition()
    np.testing.assert_allclose(R.sum(axis=1), 1.0, atol=1e-14)
    # a two-state chain is reversible
    np.testing.assert_allclose(R, P, atol=1e-12)
    assert dual_base(m).kind == "markov"
    t = trajectory(m, 20000)
    assert np.mean(t.symbols == 0) == pytest.approx(0.75, abs=0.03)


@pytest.mark.parametrize("kw", [
    dict(kind="bernoulli", probs=(0.5, 0.4)),
    dict(kind="bernoulli", probs=(1.2, -0.2)),
    dict(kind="markov", transition=((0.5, 0.4), (0.5, 0.5))),
    dict(kind="markov", transition=((1.0, 0.0), (0.0, 1.0))),
    dict(kind="nope"),
    dict(kind="fixed", seed=-1),
])
def test_invalid_bases(kw):
    with pytest.raises(ValueError):
        BaseProcess(**kw)


def test_trajectory_errors():
    with pytest.raises(ValueError):
        trajectory(FIXED, 0)
    t = trajectory(BaseProcess("bernoulli", (0.5, 0.5)), 5, two_sided=False)
    with pytest.raises(IndexError):
        t.symbol_at(-1)
    with pytest.raises(IndexError):
        t.window(3, 5)


def test_base_json_roundtrip():
    for b in (FIXED, BaseProcess("bernoulli", (0.25, 0.75), seed=9),
              BaseProcess("markov", transition=((0.2, 0.8), (0.6, 0.4)), start=1, seed=2 ** 63)):
        assert BaseProcess.from_json(json.loads(json.dumps(b.to_json()))) == b


# -- products ---------------------------------------------------------------

def test_product_examples():
    g = Generator.from_arrays([J])
    t = trajectory(FIXED, 10)
    np.testing.assert_array_equal(cocycle_product(g, t, 0, 2).represented(), [[4, 3], [0, 1]])
    P0 = cocycle_product(g, t, 0, 0)
    np.testing.assert_array_equal(P0.represented(), np.eye(2))
    assert P0.logscale == 0.0
    g2 = Generator.from_arrays([DA, DB])
    t2 = Trajectory(np.array([0, 1]))
    np.testing.assert_allclose(cocycle_product(g2, t2, 0, 2).represented(), np.diag([8, 1 / 15]),
                               rtol=1e-15)


def test_product_norm_window_and_overflow():
    g = Generator.from_arrays([J * 1e3])
    P = cocycle_product(g, trajectory(FIXED, 2000), 0, 2000)
    n = np.abs(P.matrix).sum(axis=1).max()
    assert 0.5 <= n <= 2.0
    # log of the top entry grows like n log(2000)
    assert P.logscale + math.log(P.matrix[0, 0]) == pytest.approx(2000 * math.log(2000), rel=1e-12)


def test_zero_product():
    g = Generator.from_arrays([np.zeros((2, 2))])
    P = cocycle_product(g, trajectory(FIXED, 3), 0, 3)
    assert P.zero and P.logscale == -INF


def test_cocycle_law(rng):
    mats = rng.standard_normal((3, 3, 3))
    g = Generator.from_arrays(list(mats))
    t = trajectory(BaseProcess("bernoulli", (0.3, 0.3, 0.4), seed=5), 400)
    for _ in range(100):
        s, n, m = (int(v) for v in rng.integers(0, 120, 3))
        full = cocycle_product(g, t, s, n + m)
        a = cocycle_product(g, t, s, n)
        b = cocycle_product(g, t, s + n, m)
        comp = b.compose(a)
        # align scales, then compare the unit-scale factors
        M1 = np.ldexp(full.matrix, full.exponent - comp.exponent)
        assert np.linalg.norm(M1 - comp.matrix) <= 1e-12 * np.linalg.norm(comp.matrix)


def test_product_window_errors():
    g = Generator.from_arrays([J])
    with pytest.raises(IndexError):
        cocycle_product(g, trajectory(FIXED, 3), 2, 5)


# -- generators -------------------------------------------------------------

def test_generator_validation():
    with pytest.raises(ValueError):
        Generator.from_arrays([np.eye(2), np.eye(3)])
    with pytest.raises(ValueError):
        Generator.from_arrays([np.array([[np.inf, 0], [0, 1]])])
    with pytest.raises(ValueError):
        Generator.from_arrays([])
    g = Generator.from_arrays([np.ones((3, 3))], split=1)
    with pytest.raises(ValueError):
        g.block("tail")
    g = Generator.from_arrays([np.eye(2)], p=INF, split=1)
    assert Generator.from_json(json.loads(json.dumps(g.to_json()))).split == 1


# -- duality ------------------------------------------------------------------

def test_dual_fixed_J():
    g = Generator.from_arrays([J])
    gd, td = dual_cocycle(g, trajectory(FIXED, 5))
    np.testing.assert_array_equal(gd.matrices[0], J.T)
    assert gd.p == 2.0 and list(td.symbols) == [0] * 5


def test_dual_diagonal_self_dual():
    g = Generator.from_arrays([DA, DB])
    t = trajectory(BaseProcess("bernoulli", (0.5, 0.5), seed=4), 30)
    gd, td = dual_cocycle(g, t)
    for a, b in zip(gd.matrices, g.matrices):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(td.symbols, t.past)
    np.testing.assert_array_equal(td.past, t.symbols)


def test_duality_identity_p1(rng):
    mats = rng.standard_normal((2, 3, 3))
    g = Generator.from_arrays(list(mats), p=1.0)
    t = trajectory(BaseProcess("bernoulli", (0.5, 0.5), seed=8), 60)
    gd, td = dual_cocycle(g, t)
    assert gd.p == INF
    for n in (1, 5, 20, 60):
        P = cocycle_product(g, t, 0, n).represented()
        D = cocycle_product(gd, td, -n, n).represented()
        for _ in range(10):
            th, x = rng.standard_normal(3), rng.standard_normal(3)
            lhs, rhs = th @ P @ x, (D @ th) @ x
            assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10 * np.abs(P).max())


def test_dual_needs_two_sided():
    g = Generator.from_arrays([J])
    with pytest.raises(ValueError):
        dual_cocycle(g, trajectory(FIXED, 3, two_sided=False))


# -- compound matrices -------------------------------------------------------

def test_compound_properties(rng):
    A, B = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    for k in (1, 2, 3, 4):
        np.testing.assert_allclose(compound(A @ B, k), compound(A, k) @ compound(B, k), atol=1e-10)
        s = np.linalg.svd(A, compute_uv=False)
        assert np.linalg.norm(compound(A, k), 2) == pytest.approx(np.prod(s[:k]), rel=1e-10)
    assert compound(A, 4).item() == pytest.approx(np.linalg.det(A), rel=1e-12)


# -- spectrum ------------------------------------------------------------------

def test_spectrum_fixed_J():
    g = Generator.from_arrays([J])
    rep = estimate_spectrum(g, FIXED, 2, [25, 50, 75, 100], 1, workers=1)
    assert rep.Delta[0] == pytest.approx(math.log(2), abs=1e-3)
    assert rep.Delta[1] == pytest.approx(math.log(2), abs=1e-3)
    assert rep.mu[1] == pytest.approx(0.0, abs=1e-3)
    assert rep.monotone_ok()


def test_spectrum_identity_exact_zero():
    g = Generator.from_arrays([np.eye(3)])
    rep = estimate_spectrum(g, FIXED, 3, [10, 20, 40], 1, workers=1)
    assert np.all(rep.mu == 0.0) and np.all(rep.Delta == 0.0)


def test_spectrum_iid_diagonal_small():
    g = Generator.from_arrays([DA, DB])
    base = BaseProcess("bernoulli", (0.5, 0.5), seed=11)
    rep = estimate_spectrum(g, base, 2, [500, 1000, 1500, 2000], 40, workers=1)
    mu_true = np.array([1.5 * math.log(2), -math.log(15) / 2])
    assert np.all(np.abs(rep.mu - mu_true) <= 4 * rep.mu_se)
    dual = estimate_spectrum(g, base, 2, [500, 1000, 1500, 2000], 40, dual=True, workers=1)
    comb = np.hypot(rep.Delta_se, dual.Delta_se)
    assert np.all(np.abs(rep.Delta - dual.Delta) <= 3 * comb + 1e-12)


def test_spectrum_dual_fixed_matrix(rng):
    g = Generator.from_arrays([rng.standard_normal((3, 3))])
    a = estimate_spectrum(g, FIXED, 3, [40, 80, 120, 160], 1, workers=1)
    b = estimate_spectrum(g, FIXED, 3, [40, 80, 120, 160], 1, dual=True, workers=1)
    np.testing.assert_allclose(a.Delta, b.Delta, atol=1e-9)


def test_spectrum_is_independent_of_workers():
    g = Generator.from_arrays([DA, DB @ rot(0.3)])
    base = BaseProcess("markov", transition=((0.2, 0.8), (0.5, 0.5)), seed=99)
    r1 = estimate_spectrum(g, base, 2, [50, 100], 12, workers=1)
    r3 = estimate_spectrum(g, base, 2, [50, 100], 12, workers=3)
    np.testing.assert_array_equal(r1.values, r3.values)
    assert json.dumps(r1.to_json(), sort_keys=True) == json.dumps(r3.to_json(), sort_keys=True)
    assert r1.to_csv() == r3.to_csv()


def test_workers_env(monkeypatch):
    monkeypatch.setenv("METKIT_WORKERS", "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2
    monkeypatch.delenv("METKIT_WORKERS")
    assert resolve_workers() >= 1


def test_spectrum_csv_format():
    g = Generator.from_arrays([J])
    rep = estimate_spectrum(g, FIXED, 2, [5, 10], 2, workers=1)
    text = rep.to_csv()
    lines = text.splitlines()
    assert lines[0] == "# metkit-spectrum-csv v1"
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    assert len(rows) == 2 * 2 * 2
    assert set(rows[0]) == {"k", "n", "sample", "value"}
    assert float(rows[0]["value"]) == rep.values[0, 0, 0]


def test_spectrum_zero_generator():
    g = Generator.from_arrays([np.zeros((2, 2))])
    rep = estimate_spectrum(g, FIXED, 2, [5, 10], 1, workers=1)
    assert np.all(np.isneginf(rep.Delta))
    json.dumps(rep.to_json())


def test_spectrum_errors():
    g = Generator.from_arrays([J])
    with pytest.raises(ValueError):
        estimate_spectrum(g, FIXED, 3, [5, 10], 1)
    with pytest.raises(ValueError):
        estimate_spectrum(g, FIXED, 1, [10, 5], 1)
    with pytest.raises(ValueError):
        estimate_spectrum(g, BaseProcess("bernoulli", (0.5, 0.5)), 1, [5], 1)


# -- kappa ----------------------------------------------------------------

def _block(head, tail):
    d = head.shape[0] + tail.shape[0]
    M = np.zeros((d, d))
    h = head.shape[0]
    M[:h, :h], M[h:, h:] = head, tail
    return M


def test_kappa_rotation_tail():
    g = Generator.from_arrays([_block(np.diag([2.0, 1.5]), 0.1 * rot(0.7)),
                               _block(np.diag([0.5, 3.0]), 0.1 * rot(-1.1))], split=2)
    base = BaseProcess("bernoulli", (0.5, 0.5), seed=1)
    assert kappa_upper(g, base, [50, 100]) == pytest.approx(math.log(0.1), abs=1e-12)


def test_kappa_empty_tail():
    g = Generator.from_arrays([np.diag([2.0, 1.0])], split=2)
    assert kappa_upper(g, FIXED, [10]) == -INF


def test_kappa_iid_scalars():
    g = Generator.from_arrays([np.diag([3.0, 0.1]), np.diag([2.0, 0.2])], split=1)
    base = BaseProcess("bernoulli", (0.5, 0.5), seed=7)
    est = kappa_upper(g, base, [2000, 4000, 6000, 8000], 60, workers=1)
    tail = estimate_spectrum(g.block("tail"), base, 1, [2000, 4000, 6000, 8000], 60, workers=1)
    truth = (math.log(0.1) + math.log(0.2)) / 2
    assert est == pytest.approx(truth, abs=4 * tail.Delta_se[0])
    assert truth == pytest.approx(-1.9560, abs=1e-4)


def test_kappa_requires_split():
    with pytest.raises(ValueError):
        kappa_upper(Generator.from_arrays([np.eye(2)]), FIXED, [5])


# -- temperedness ----------------------------------------------------------

def test_temperedness_examples():
    n = np.arange(1, 10001)
    assert temperedness_diagnostic(np.full(10000, 3.0), 0.05).passed
    rep = temperedness_diagnostic(np.log1p(n), 0.05)
    assert rep.passed and rep.max_ratio == pytest.approx(math.log1p(5001) / 5001, rel=1e-12)
    bad = temperedness_diagnostic(n.astype(float), 0.99)
    assert not bad.passed and bad.max_ratio == pytest.approx(1.0)
    with pytest.raises(ValueError):
        temperedness_diagnostic([-1.0, 2.0])


@settings(max_examples=25)
@given(st.floats(0.01, 0.99))
def test_linear_growth_fails_below_one(thr):
    assert not temperedness_diagnostic(np.arange(1.0, 501.0), thr).passed


def test_tempered_bound_series():
    g = Generator.from_arrays([DA, DB])
    base = BaseProcess("bernoulli", (0.5, 0.5), seed=20240611)
    t = trajectory(base, 6000)
    lam = -math.log(15) / 2
    s = tempered_bound_series(g, t, [0.0, 1.0], lam, 0.1, 5000, 200)
    assert np.all(s >= 0) and temperedness_diagnostic(s, 0.05).passed
    with pytest.raises(ValueError):
        tempered_bound_series(Generator.from_arrays([J]), trajectory(FIXED, 10), [0.0, 1.0], 0, 0.1, 5, 2)
