"""Oseledets filtration and splitting from consistent sequences of cocycle products.

The approximate slow space at level l after n steps is
``{x : theta_i(L^{(n)} x) = 0, i <= d_{l-1}}`` where ``theta_i`` are the
functionals of a consistent sequence for the renormalised product.  The
splitting uses the same construction on the adjoint cocycle and annihilators.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .cocycle import (
    LN2,
    Generator,
    ScaledProduct,
    SpectrumReport,
    Trajectory,
    _opnorm_inf,
    _summarise,
    cocycle_product,
    compound,
    dual_cocycle,
)
from .consistent_sequences import build
from .normed_space import (
    INF,
    NormedSpace,
    Subspace,
    dist_to_subspace,
    grassmann_distance,
    intersect,
    max_dist_on_sphere,
    p_to_json,
)
from .volume import LinearMap

GAP_THRESHOLD = 0.05
FILTRATION_CSV_VERSION = "metkit-filtration-csv v1"


# ---------------------------------------------------------------------------
# exponents


@dataclass
class ExponentGroups:
    lams: list
    mults: list

    @property
    def r(self) -> int:
        return len(self.lams)

    def D(self, level: int) -> int:
        """``d_level = m_1 + ... + m_level`` (``d_0 = 0``)."""
        return int(sum(self.mults[:level]))

    def to_json(self) -> dict:
        return {"lams": [None if not np.isfinite(x) else float(x) for x in self.lams],
                "mults": list(map(int, self.mults))}


def group_exponents(mu, gap_threshold: float = GAP_THRESHOLD, floor: float | None = None) -> ExponentGroups:
    """Cluster exponents (sorted decreasing) whose consecutive gaps are below ``gap_threshold``.

    ``mu`` may be a :class:`SpectrumReport`.  Exponents below ``floor`` are
    merged into one trailing group.
    """
    if isinstance(mu, SpectrumReport):
        mu = mu.mu
    mu = np.sort(np.asarray(mu, dtype=float))[::-1]
    if floor is not None:
        mu = np.where(mu < floor, -INF, mu)
    groups: list[list[float]] = []
    for v in mu:
        both_inf = groups and np.isneginf(v) and np.isneginf(groups[-1][-1])
        if groups and (both_inf or (np.isfinite(v) and groups[-1][-1] - v < gap_threshold)):
            groups[-1].append(v)
        else:
            groups.append([v])
    lams = [float(np.mean(g)) if np.all(np.isfinite(g)) else -INF for g in groups]
    return ExponentGroups(lams, [len(g) for g in groups])


# ---------------------------------------------------------------------------
# slow spaces


def _scaled_map(gen: Generator, P: ScaledProduct) -> LinearMap:
    return LinearMap(P.matrix, gen.space, gen.space)


def _annihilated(rows: np.ndarray, space: NormedSpace) -> Subspace:
    """``{x : rows @ x = 0}`` for linearly independent ``rows``."""
    d = space.dim
    if rows.shape[0] == 0:
        return Subspace.full(space)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    Q, R = np.linalg.qr(rows.T, mode="complete")
    if np.min(np.abs(np.diag(R))) < 1e-12:
        raise ValueError("functionals are numerically dependent")
    return Subspace(space, Q[:, rows.shape[0]:], orthonormal=True) if rows.shape[0] < d \
        else Subspace.zero(space)


def slow_space_data(gen: Generator, traj: Trajectory, n: int, D: int, *, start: int = 0,
                    seed: int = 0):
    """``(V, Y)``: annihilator of the first ``D`` pulled-back functionals and span of ``x_1..x_D``."""
    if D == 0:
        return Subspace.full(gen.space), Subspace.zero(gen.space)
    P = cocycle_product(gen, traj, start, n)
    if P.zero:
        raise ValueError("the cocycle product vanishes; no consistent sequence exists")
    T = _scaled_map(gen, P)
    seq = build(T, D, seed=seed)
    if seq.k < D:
        raise ValueError(f"consistent sequence degenerates at k={seq.degenerate_at} < {D}")
    rows = seq.Theta().T @ P.matrix
    return _annihilated(rows, gen.space), Subspace(gen.space, seq.X())


def approximate_slow_space(gen: Generator, traj: Trajectory, n: int, level: int,
                           groups: ExponentGroups, *, start: int = 0, seed: int = 0) -> Subspace:
    """``V_level^{(n)}`` at ``sigma^start omega``."""
    if level < 1:
        raise ValueError("levels start at 1")
    if level > groups.r:
        raise ValueError(f"level {level} does not exist: the spectrum has r = {groups.r} level(s)")
    return slow_space_data(gen, traj, n, groups.D(level - 1), start=start, seed=seed)[0]


def equivariance_residual(gen: Generator, traj: Trajectory, V0: Subspace, V1: Subspace,
                          start: int = 0) -> float:
    """``sup { d(w, V1) : w in L(V0), ||w|| = 1 }`` with ``L`` the map at step ``start``."""
    if V0.k != V1.k:
        raise ValueError("subspaces must have matching dimension")
    if V0.k == 0:
        return 0.0
    L = gen.matrices[traj.symbol_at(start)]
    img = Subspace.span(gen.space, L @ V0.basis)
    if img.k == 0:
        return 0.0
    if V1.k == 0:
        return 1.0
    return float(max_dist_on_sphere(img, V1)[0])


def _slope(ns, vals, floor: float = 1e-13) -> float:
    ns = np.asarray(ns, dtype=float)
    vals = np.asarray(vals, dtype=float)
    keep = vals > floor
    if keep.sum() < 2:
        return -INF if np.all(vals <= floor) else float("nan")
    return float(np.polyfit(ns[keep], np.log(vals[keep]), 1)[0])


@dataclass
class LevelSeries:
    level: int
    codim: int
    n_grid: list
    spaces: list                  # V_l^{(n)} per n
    fast: list                    # Y-type span of x_1..x_{d_l} per n
    cauchy: list                  # distance between consecutive grid spaces (aligned with n_grid[1:])
    equiv: list                   # equivariance residual per n
    slope: float
    gap: float

    @property
    def limit(self) -> Subspace:
        return self.spaces[-1]

    def to_json(self) -> dict:
        f = lambda x: None if not np.isfinite(x) else float(x)
        return {"level": self.level, "codim": self.codim, "n_grid": list(map(int, self.n_grid)),
                "cauchy_dist": [float(x) for x in self.cauchy],
                "equiv_residual": [float(x) for x in self.equiv],
                "cauchy_slope": f(self.slope), "gap": f(self.gap),
                "final_step": float(self.cauchy[-1]) if self.cauchy else None,
                "limit": self.limit.to_json()}


@dataclass
class ApproxFiltration:
    groups: ExponentGroups
    levels: list = field(default_factory=list)

    def V(self, level: int) -> Subspace:
        if level == 1:
            space = self.levels[0].limit.space if self.levels else None
            return Subspace.full(space) if space is not None else None
        return self.levels[level - 2].limit

    def to_json(self) -> dict:
        return {"groups": self.groups.to_json(), "r": self.groups.r,
                "levels": [lv.to_json() for lv in self.levels]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {FILTRATION_CSV_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "n", "cauchy_dist", "equiv_residual"])
        for lv in self.levels:
            for i, n in enumerate(lv.n_grid):
                cd = repr(float(lv.cauchy[i - 1])) if i > 0 else ""
                w.writerow([lv.level, int(n), cd, repr(float(lv.equiv[i]))])
        return buf.getvalue()


def filtration(gen: Generator, traj: Trajectory, n_grid, groups: ExponentGroups, *,
               start: int = 0, seed: int = 0, equivariance: bool = True) -> ApproxFiltration:
    """Approximate slow spaces ``V_l^{(n)}`` for every level ``l >= 2`` across ``n_grid``."""
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])) or not n_grid or n_grid[0] < 1:
        raise ValueError("n_grid must be strictly increasing positive integers")
    out = ApproxFiltration(groups)
    for level in range(2, groups.r + 1):
        if not np.isfinite(groups.lams[level - 1]) and level == groups.r and groups.D(level - 1) == gen.dim:
            break
        D = groups.D(level - 1)
        spaces, fast, equiv = [], [], []
        for n in n_grid:
            V, Y = slow_space_data(gen, traj, n, D, start=start, seed=seed)
            spaces.append(V)
            fast.append(Y)
            if equivariance:
                V1, _ = slow_space_data(gen, traj, n, D, start=start + 1, seed=seed)
                equiv.append(equivariance_residual(gen, traj, V, V1, start))
            else:
                equiv.append(float("nan"))
        cauchy = [grassmann_distance(a, b) for a, b in zip(spaces, spaces[1:])]
        gap = groups.lams[level - 2] - groups.lams[level - 1]
        slope = _slope(n_grid[1:], cauchy) if cauchy else float("nan")
        out.levels.append(LevelSeries(level, D, n_grid, spaces, fast, cauchy, equiv, slope, gap))
    return out


# ---------------------------------------------------------------------------
# growth of individual vectors


@dataclass
class GrowthRate:
    limit: float
    se: float
    n_grid: list
    values: list
    vanished_at: int | None = None

    def to_json(self) -> dict:
        f = lambda x: None if not np.isfinite(x) else float(x)
        return {"limit": f(self.limit), "se": f(self.se), "n_grid": self.n_grid,
                "values": [f(v) for v in self.values], "vanished_at": self.vanished_at}


def _log_norms(gen: Generator, traj: Trajectory, v: np.ndarray, n_max: int, start: int = 0):
    """``log ||L^{(n)} v||`` for ``n = 1..n_max`` (``-inf`` once the orbit vanishes)."""
    p = gen.p
    w = v.astype(float).copy()
    e = 0
    out = np.full(n_max, -INF)
    for j, s in enumerate(traj.window(start, n_max)):
        w = gen.matrices[int(s)] @ w
        nrm = float(np.linalg.norm(w, ord=p))
        if nrm == 0.0:
            return out, j + 1
        m, k = math.frexp(nrm)
        w = np.ldexp(w, -k)
        e += k
        out[j] = e * LN2 + math.log(m)
    return out, None


def growth_rate(gen: Generator, traj: Trajectory, v, n_grid, *, start: int = 0) -> GrowthRate:
    """Extrapolated ``lim (1/n) log ||L^{(n)} v||`` (regression on ``1/n``, top half of the grid)."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ValueError("growth rate of the zero vector is undefined")
    grid = np.asarray([int(n) for n in n_grid])
    logs, vanished = _log_norms(gen, traj, v, int(grid[-1]), start)
    base = math.log(float(np.linalg.norm(v, ord=gen.p)))
    vals = (logs[grid - 1] - base) / grid
    if vanished is not None:
        return GrowthRate(-INF, 0.0, grid.tolist(), vals.tolist(), vanished)
    top = np.arange(len(grid) // 2, len(grid)) if len(grid) >= 2 else np.arange(1)
    x = 1.0 / grid[top]
    if len(top) >= 2:
        X = np.column_stack([np.ones_like(x), x])
        beta, *_ = np.linalg.lstsq(X, vals[top], rcond=None)
        lim = float(beta[0])
        if len(top) >= 3:
            r = vals[top] - X @ beta
            se = math.sqrt(float(r @ r) / (len(top) - 2) * np.linalg.inv(X.T @ X)[0, 0])
        else:
            se = abs(float(vals[top][-1] - lim))
    else:
        lim, se = float(vals[-1]), float("nan")
    return GrowthRate(lim, se, grid.tolist(), vals.tolist())


# ---------------------------------------------------------------------------
# splitting


@dataclass
class Splitting:
    Z: list                       # Subspace per finite level
    V_tail: Subspace
    exponents: list
    growth: list                  # measured forward growth of each block
    dual_slow: list               # V*_l, l >= 2
    Y: list                       # annihilators of V*_l
    rank_gap: float               # smallest singular value of the stacked orthonormal bases
    residual: float               # max_l grassmann distance(Z_l + V_{l+1}, V_l)

    @property
    def direct_sum(self) -> bool:
        return self.rank_gap > 1e-8

    def to_json(self) -> dict:
        f = lambda x: None if not np.isfinite(x) else float(x)
        return {"Z": [z.to_json() for z in self.Z], "V_tail": self.V_tail.to_json(),
                "exponents": [f(x) for x in self.exponents],
                "growth": [g.to_json() for g in self.growth],
                "dual_slow": [v.to_json() for v in self.dual_slow],
                "Y": [y.to_json() for y in self.Y],
                "rank_gap": float(self.rank_gap), "direct_sum_residual": float(self.residual),
                "direct_sum": self.direct_sum}


def _sum(*spaces: Subspace) -> Subspace:
    space = spaces[0].space
    cols = [s.basis for s in spaces if s.k]
    if not cols:
        return Subspace.zero(space)
    return Subspace.span(space, np.hstack(cols))


def splitting(gen: Generator, traj: Trajectory, n: int, groups: ExponentGroups, *,
              growth_grid=None, seed: int = 0) -> Splitting:
    """Blocks ``Z_l = Y_{l+1} ∩ V_l`` with ``Y_l`` the annihilator of the dual slow space."""
    if not traj.two_sided:
        raise ValueError("the splitting needs a two-sided trajectory (invertible base)")
    space = gen.space
    dgen, dtraj = dual_cocycle(gen, traj)
    finite = [i for i, lam in enumerate(groups.lams) if np.isfinite(lam)]
    r = len(finite)
    V = [Subspace.full(space)]
    Vs = []
    for level in range(2, groups.r + 1):
        D = groups.D(level - 1)
        V.append(slow_space_data(gen, traj, n, D, seed=seed)[0])
        Vs.append(slow_space_data(dgen, dtraj, n, D, seed=seed)[0])
    # functionals in V*_l are combinations of its basis columns, so the
    # annihilator Y_l is {x : B^T x = 0}
    Y = [Subspace.zero(space)] + [
        _annihilated(v.basis.T, space) if v.k < space.dim else Subspace.zero(space) for v in Vs
    ] + [Subspace.full(space)]
    Z = []
    for level in range(1, r + 1):
        Zl = intersect(Y[level], V[level - 1])
        Z.append(Zl)
    V_tail = V[r] if r < groups.r else Subspace.zero(space)
    blocks = [z.basis for z in Z if z.k] + ([V_tail.basis] if V_tail.k else [])
    stacked = np.hstack(blocks) if blocks else np.zeros((space.dim, 0))
    sv = np.linalg.svd(stacked, compute_uv=False) if stacked.size else np.zeros(1)
    rank_gap = float(sv[-1]) if stacked.shape[1] == space.dim else 0.0
    residual = 0.0
    for level in range(1, r + 1):
        nxt = V[level] if level < r else V_tail
        residual = max(residual, grassmann_distance(_sum(Z[level - 1], nxt), V[level - 1]))
    growth = []
    if growth_grid is not None:
        # the blocks carry errors of order e^{-n gap}; iterating them much past
        # n/2 steps lets the faster directions swamp the slow ones
        h = max(1, n // 2)
        grid = [int(g) for g in growth_grid if g <= h] or sorted({max(1, n // 4), h})
        for z in Z:
            growth.append(growth_rate(gen, traj, z.basis[:, 0], grid))
    return Splitting(Z, V_tail, [groups.lams[i] for i in finite], growth, Vs,
                     Y[1:-1], rank_gap, residual)


# ---------------------------------------------------------------------------
# reduced cocycle


def sequence_spectrum(mats, kmax: int, n_grid) -> SpectrumReport:
    """Volume growth of the product ``mats[n-1] ... mats[0]`` (a single orbit)."""
    mats = np.asarray(mats, dtype=float)
    grid = np.asarray([int(n) for n in n_grid], dtype=np.int64)
    if grid[-1] > len(mats):
        raise ValueError("grid exceeds the number of matrices")
    values = np.empty((1, kmax, len(grid)))
    pos = {int(n): g for g, n in enumerate(grid)}
    for k in range(1, kmax + 1):
        C = compound(mats[: grid[-1]], k)
        P = np.eye(C.shape[-1])
        e, dead = 0, False
        for j in range(grid[-1]):
            P = C[j] @ P
            nrm = float(_opnorm_inf(P))
            if nrm == 0.0:
                dead = True
            else:
                _, s = math.frexp(nrm)
                P = np.ldexp(P, -s)
                e += s
            g = pos.get(j + 1)
            if g is not None:
                values[0, k - 1, g] = -INF if dead else \
                    (e * LN2 + math.log(np.linalg.norm(P, 2))) / (j + 1)
    return _summarise(values, grid, kmax, 1, 2.0, False)


@dataclass
class ReducedCocycleReport:
    level: int
    restricted_mu: list
    expected_mu: list
    max_abs_diff: float
    tol: float
    passed: bool
    max_equiv_residual: float
    quotient_rates: list
    quotient_bound: float
    quotient_passed: bool

    def to_json(self) -> dict:
        f = lambda x: None if not np.isfinite(x) else float(x)
        return {"level": self.level, "restricted_mu": [f(x) for x in self.restricted_mu],
                "expected_mu": [f(x) for x in self.expected_mu],
                "max_abs_diff": f(self.max_abs_diff), "tol": self.tol, "pass": bool(self.passed),
                "max_equiv_residual": float(self.max_equiv_residual),
                "quotient_rates": [f(x) for x in self.quotient_rates],
                "quotient_bound": f(self.quotient_bound), "quotient_pass": bool(self.quotient_passed)}


def verify_reduced_cocycle(gen: Generator, traj: Trajectory, level: int, groups: ExponentGroups,
                           full_mu, n: int, *, n_slow: int = 25, kmax: int | None = None,
                           tol: float = 2e-2, epsilon: float | None = None, n_quotient: int = 3,
                           seed: int = 0) -> ReducedCocycleReport:
    """Exponents of the cocycle compressed to the moving slow space ``V_level``.

    At each step the slow space is recomputed from ``n_slow`` forward steps;
    ``R_i = B_{i+1}^T L_i B_i`` with orthonormal bases ``B_i``.  The relative
    leakage ``||(I - B_{i+1} B_{i+1}^T) L_i B_i|| / ||L_i B_i||`` is reported.
    """
    D = groups.D(level - 1)
    dim = gen.dim - D
    if dim <= 0:
        raise ValueError("the slow space at this level is trivial")
    kmax = dim if kmax is None else min(kmax, dim)
    bases = [slow_space_data(gen, traj, n_slow, D, start=i, seed=seed)[0].basis for i in range(n + 1)]
    R, resid = [], 0.0
    for i in range(n):
        L = gen.matrices[traj.symbol_at(i)]
        LB = L @ bases[i]
        R.append(bases[i + 1].T @ LB)
        leak = LB - bases[i + 1] @ R[-1]
        nrm = np.linalg.norm(LB, 2)
        resid = max(resid, float(np.linalg.norm(leak, 2) / nrm) if nrm > 0 else 0.0)
    grid = sorted({max(1, n // 2), max(1, (3 * n) // 4), n})
    rep = sequence_spectrum(R, kmax, grid)
    expected = list(np.asarray(full_mu, dtype=float)[D:D + kmax])
    got = list(rep.mu)
    diffs = [abs(a - b) for a, b in zip(got, expected) if np.isfinite(a) and np.isfinite(b)]
    diff = max(diffs) if diffs else 0.0
    # quotient growth: d(L^{(m)} w, V(sigma^m omega)) / d(w, V(omega)) grows at rate >= lam_{level-1}
    lam_prev = groups.lams[level - 2]
    gaps = [a - b for a, b in zip(groups.lams, groups.lams[1:]) if np.isfinite(a - b)]
    eps = epsilon if epsilon is not None else 0.1 * (min(gaps) if gaps else 1.0)
    rng = np.random.default_rng(seed)
    V0 = Subspace(gen.space, bases[0], orthonormal=True)
    Vn = Subspace(gen.space, bases[n], orthonormal=True)
    P = cocycle_product(gen, traj, 0, n)
    rates = []
    for _ in range(n_quotient):
        w = rng.standard_normal(gen.dim)
        d0 = dist_to_subspace(w, V0)
        img = P.matrix @ w
        dn = dist_to_subspace(img, Vn)
        rates.append((math.log(dn) + P.logscale - math.log(d0)) / n if dn > 0 and d0 > 0 else -INF)
    bound = lam_prev - eps
    qpass = all(r >= bound for r in rates)
    return ReducedCocycleReport(level, got, expected, diff, tol, diff <= tol, resid,
                                rates, bound, qpass)
