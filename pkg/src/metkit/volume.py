"""Volume growth of linear maps: vol_k, d_kT, D_k, E_k, F_k and the inequality suite.

Sup-type quantities are returned as :class:`VolumeEnclosure` intervals.  The
lower end is always the value of an explicit witness (vectors, functionals or a
frame).  The upper end comes from bounds that hold for every admissible input:
exact enumeration where it exists (``E_k`` for p in {1, inf}), otherwise the
norm-equivalence comparison with the Euclidean singular values and the
operator-norm power bound.  Inequality checks compare ``lo`` of one side with
``hi`` of the other, so one-sided estimation error cannot fail them.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .normed_space import (
    INF,
    MAX_VERTICES,
    NormedSpace,
    Subspace,
    ball_vertices,
    RANK_TOL,
    norming_functional,
    poly_distance,
    p_to_json,
    sphere_net,
    vertex_count,
)

MODES = ("euclidean-exact", "optimize", "net")
CHECK_RTOL = 1e-9
CHECK_ATOL = 1e-12
ZERO_RTOL = 1e-13
NET_BUDGET = 20_000_000


@dataclass(frozen=True)
class LinearMap:
    """``matrix`` acting from ``domain`` to ``codomain`` (same exponent p).

    ``restriction`` optionally limits the domain to a subspace; vectors of the
    restricted domain are then written as coefficients in its basis.
    """

    matrix: np.ndarray
    domain: NormedSpace
    codomain: NormedSpace
    restriction: Subspace | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (self.codomain.dim, self.domain.dim):
            raise ValueError(
                f"matrix shape {m.shape} does not match spaces "
                f"({self.codomain.dim} x {self.domain.dim})")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix has non-finite entries")
        if self.domain.p != self.codomain.p:
            raise ValueError("domain and codomain must use the same norm exponent")
        if self.restriction is not None and self.restriction.space != self.domain:
            raise ValueError("restriction must be a subspace of the domain")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_array(cls, matrix, p: float = 2.0) -> "LinearMap":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix, NormedSpace(matrix.shape[1], p), NormedSpace(matrix.shape[0], p))

    @property
    def p(self) -> float:
        return self.domain.p

    @property
    def B(self) -> np.ndarray:
        """Embedding of domain coefficients into the ambient domain."""
        if self.restriction is None:
            return np.eye(self.domain.dim)
        return self.restriction.basis

    @property
    def A(self) -> np.ndarray:
        """Matrix acting on domain coefficients."""
        if self.restriction is None:
            return self.matrix
        return self.matrix @ self.restriction.basis

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def dual(self) -> "LinearMap":
        """Adjoint map between the dual spaces."""
        if self.restriction is not None:
            raise ValueError("the adjoint of a restricted map is not supported")
        return LinearMap(self.matrix.T, self.codomain.dual(), self.domain.dual())

    def restrict(self, V: Subspace) -> "LinearMap":
        return LinearMap(self.matrix, self.domain, self.codomain, V)

    def compose(self, inner: "LinearMap") -> "LinearMap":
        """``self ∘ inner``."""
        if inner.codomain != self.domain:
            raise ValueError("maps are not composable")
        return LinearMap(self.matrix @ inner.matrix, inner.domain, self.codomain, inner.restriction)

    def scale(self, c: float) -> "LinearMap":
        return LinearMap(c * self.matrix, self.domain, self.codomain, self.restriction)

    def dom_norm(self, c) -> float:
        return float(np.linalg.norm(self.B @ c, ord=self.p))


@dataclass
class VolumeEnclosure:
    lo: float
    hi: float
    mode: str
    certified: bool = True
    witness: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.lo > self.hi:
            if self.lo <= self.hi * (1 + CHECK_RTOL) + CHECK_ATOL:
                self.hi = self.lo
            else:
                raise AssertionError(f"inconsistent enclosure lo={self.lo!r} > hi={self.hi!r}")
        if self.mode == "euclidean-exact" and self.lo != self.hi:
            raise AssertionError("exact enclosure must have lo == hi")

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "mode": self.mode, "certified": self.certified}


# ---------------------------------------------------------------------------
# volumes


def _dists_to(W: Subspace, Y: np.ndarray) -> np.ndarray:
    """Distances of the columns of ``Y`` to ``W``."""
    space = W.space
    if W.k == 0:
        return np.linalg.norm(Y, ord=space.p, axis=0)
    if W.k == space.dim:
        return np.zeros(Y.shape[1])
    if space.p == 2.0:
        return np.linalg.norm(Y - W.projector @ Y, axis=0)
    if space.is_polyhedral:
        return np.abs(W._dual_vertices.T @ Y).max(axis=0)
    from .normed_space import dist_to_subspace
    return np.array([dist_to_subspace(y, W) for y in Y.T])


def _span(space: NormedSpace, Y: np.ndarray) -> Subspace | None:
    """Span of the columns, or ``None`` when they are (numerically) dependent."""
    try:
        return Subspace(space, Y)
    except ValueError:
        return None


def vol_factors(Y, space: NormedSpace) -> np.ndarray:
    """Successive distances ``d(y_i, lin(y_j : j < i))`` of the columns of ``Y``."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != space.dim:
        raise ValueError("vectors do not belong to the space")
    k = Y.shape[1]
    out = np.zeros(k)
    if space.p == 2.0:
        r = np.abs(np.diag(np.linalg.qr(Y, mode="r")))
        out[:len(r)] = r
        # a factor at roundoff level of its own vector means it lies in the preceding span
        small = out <= ZERO_RTOL * np.linalg.norm(Y, axis=0)
        if small.any():
            out[int(np.argmax(small)):] = 0.0
        return out
    poly = space.is_polyhedral
    scale = float(np.abs(Y).max()) if Y.size else 0.0
    for i in range(k):
        if i == 0:
            out[0] = np.linalg.norm(Y[:, 0], ord=space.p)
        elif poly:
            sv = np.linalg.svd(Y[:, :i], compute_uv=False)
            if sv[-1] <= RANK_TOL * max(sv[0], 1e-300):
                return out
            try:
                out[i] = poly_distance(Y[:, i], Y[:, :i], space.p)
            except ValueError:
                W = _span(space, Y[:, :i])
                if W is None:
                    return out
                out[i] = _dists_to(W, Y[:, i:i + 1])[0]
        else:
            W = _span(space, Y[:, :i])
            if W is None:
                return out
            out[i] = _dists_to(W, Y[:, i:i + 1])[0]
        if out[i] == 0.0:
            return out
    return out


def vol_k(vectors, space: NormedSpace) -> float:
    """``prod_i d(v_i, lin(v_j : j < i))`` for the columns of ``vectors``, in order."""
    return float(np.prod(vol_factors(vectors, space)))


def d_kT(T: LinearMap, vectors) -> float:
    """``vol_k(T v_1, ..., T v_k)``; ``vectors`` are columns in the domain coordinates."""
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    if vectors.shape[0] != T.m:
        raise ValueError("vectors do not belong to the domain of T")
    return vol_k(T.A @ vectors, T.codomain)


# ---------------------------------------------------------------------------
# shared bounds


def _norm_ratio(d: int, p: float) -> float:
    """``sup ||z||_p / ||z||_2 * sup ||z||_2 / ||z||_p`` over ``R^d``."""
    if p == INF:
        e = 0.5
    else:
        e = abs(0.5 - 1.0 / p)
    return d ** e


def _euclid_factor(T: LinearMap) -> float:
    # ||Tx||_p <= c ||Tx||_2 and ||x||_2 <= r ||x||_p combined
    p = T.p
    inv = 0.0 if p == INF else 1.0 / p
    c = T.codomain.dim ** max(0.0, inv - 0.5)
    r = T.domain.dim ** max(0.0, 0.5 - inv)
    return c * r


def _dual_euclid_factor(T: LinearMap) -> float:
    # ||theta||_2 <= r_q ||theta||_q and ||x||_2 <= r_p ||x||_p
    p, q = T.p, T.codomain.q
    rp = T.domain.dim ** max(0.0, 0.5 - (0.0 if p == INF else 1.0 / p))
    rq = T.codomain.dim ** max(0.0, 0.5 - (0.0 if q == INF else 1.0 / q))
    return rp * rq


def _svals(T: LinearMap) -> np.ndarray:
    s = np.linalg.svd(T.A, compute_uv=False)
    return np.r_[s, np.zeros(max(0, T.m - len(s)))]


def _domain_vertices(T: LinearMap) -> np.ndarray:
    return ball_vertices(T.B, T.p)


def operator_norm(T: LinearMap) -> tuple[float, float, np.ndarray]:
    """``(lo, hi, maximiser)`` for ``||T||``; exact for p in {1, 2, inf}."""
    p = T.p
    A = T.A
    if not np.any(A):
        return 0.0, 0.0, _unit(T, np.eye(T.m)[:, 0])
    if p == 2.0:
        _, s, vt = np.linalg.svd(A)
        return float(s[0]), float(s[0]), vt[0]
    if T.domain.is_polyhedral and vertex_count(T.domain.dim, T.m, p) <= MAX_VERTICES:
        C = _domain_vertices(T)
        vals = np.linalg.norm(A @ C, ord=p, axis=0)
        j = int(np.argmax(vals))
        return float(vals[j]), float(vals[j]), C[:, j]
    s = _svals(T)
    hi = float(_euclid_factor(T) * s[0])
    _, _, vt = np.linalg.svd(A)
    lo, c = _maximize_norm_ratio(T)
    return lo, max(hi, lo), c


def _unit(T: LinearMap, c: np.ndarray) -> np.ndarray:
    n = T.dom_norm(c)
    return c / n if n > 0 else c


def _maximize_norm_ratio(T: LinearMap, starts: int = 8, seed: int = 0):
    rng = np.random.default_rng(seed)
    A, p = T.A, T.p

    def f(c):
        n = T.dom_norm(c)
        return -np.linalg.norm(A @ c, ord=p) / n if n > 0 else 0.0

    _, _, vt = np.linalg.svd(A)
    best = (0.0, vt[0])
    for c0 in [vt[0]] + list(rng.standard_normal((starts, T.m))):
        res = optimize.minimize(f, c0, method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-14, "maxfev": 500 * T.m})
        if -res.fun > best[0]:
            best = (-res.fun, res.x)
    return float(best[0]), _unit(T, best[1])


def _check_k(T: LinearMap, k: int, mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not 1 <= k <= T.m:
        raise ValueError(f"k must be in [1, {T.m}], got {k}")
    if mode == "euclidean-exact" and T.p != 2.0:
        raise ValueError("euclidean-exact mode requires p = 2")


def _candidate_directions(T: LinearMap, rng, n_random: int) -> np.ndarray:
    """Unit domain directions worth trying: ball vertices, singular vectors, random."""
    cols = []
    if T.domain.is_polyhedral and vertex_count(T.domain.dim, T.m, T.p) <= 4096:
        cols.append(_domain_vertices(T))
    _, _, vt = np.linalg.svd(T.A)
    cols.append(vt.T)
    cols.append(np.eye(T.m))
    if n_random:
        cols.append(rng.standard_normal((T.m, n_random)))
    C = np.hstack(cols)
    norms = np.linalg.norm(T.B @ C, ord=T.p, axis=0)
    return C[:, norms > 0] / norms[norms > 0]


# ---------------------------------------------------------------------------
# D_k


def _d_value(T: LinearMap, C: np.ndarray) -> float:
    return vol_k(T.A @ C, T.codomain)


def _greedy_chain(T: LinearMap, cand: np.ndarray, k: int, first: np.ndarray | None = None):
    """Pick columns one at a time maximising the next distance factor."""
    Y = T.A @ cand
    chosen = []
    if first is not None:
        chosen.append(first)
    while len(chosen) < k:
        if chosen:
            W = _span(T.codomain, T.A @ np.column_stack(chosen))
            if W is None:
                break
            vals = _dists_to(W, Y)
        else:
            vals = np.linalg.norm(Y, ord=T.p, axis=0)
        chosen.append(cand[:, int(np.argmax(vals))])
    if len(chosen) < k:
        return None
    return np.column_stack(chosen)


def _coordinate_ascent(T: LinearMap, C: np.ndarray, cand: np.ndarray, sweeps: int = 4):
    best = _d_value(T, C)
    k = C.shape[1]
    for _ in range(sweeps):
        improved = False
        for i in range(k):
            if i == k - 1:
                W = _span(T.codomain, T.A @ C[:, :i]) if i else None
                if i and W is None:
                    continue
                head = float(np.prod(vol_factors(T.A @ C[:, :i], T.codomain))) if i else 1.0
                vals = head * (_dists_to(W, T.A @ cand) if i else
                               np.linalg.norm(T.A @ cand, ord=T.p, axis=0))
                j = int(np.argmax(vals))
                if vals[j] > best * (1 + 1e-13):
                    C = C.copy()
                    C[:, i] = cand[:, j]
                    best = _d_value(T, C)
                    improved = True
                continue
            for j in range(cand.shape[1]):
                trial = C.copy()
                trial[:, i] = cand[:, j]
                v = _d_value(T, trial)
                if v > best * (1 + 1e-13):
                    C, best, improved = trial, v, True
        if not improved:
            break
    return C, best


def _polish(value_fn, T: LinearMap, C: np.ndarray, maxfev: int):
    """Nelder-Mead on unnormalised domain coefficients, columns renormalised."""
    shape = C.shape

    def neg(flat):
        M = flat.reshape(shape)
        norms = np.linalg.norm(T.B @ M, ord=T.p, axis=0)
        if np.any(norms == 0):
            return 0.0
        return -value_fn(M / norms)

    res = optimize.minimize(neg, C.ravel(), method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-15, "maxfev": maxfev,
                                     "adaptive": True})
    M = res.x.reshape(shape)
    M = M / np.linalg.norm(T.B @ M, ord=T.p, axis=0)
    return M, -res.fun


def D_k(T: LinearMap, k: int, mode: str = "optimize", *, starts: int = 4, seed: int = 0,
        polish: bool | None = None, net_h: float = 0.05) -> VolumeEnclosure:
    """``sup d_kT(v_1, ..., v_k)`` over unit ``v_i``."""
    _check_k(T, k, mode)
    s = _svals(T)
    prod_s = float(np.prod(s[:k]))
    if mode == "euclidean-exact":
        _, _, vt = np.linalg.svd(T.A)
        return VolumeEnclosure(prod_s, prod_s, mode, witness={"vectors": vt[:k].T})
    nlo, nhi, _ = operator_norm(T)
    hi = min(_euclid_factor(T) ** k * prod_s, nhi ** k)
    if nhi == 0.0:
        return VolumeEnclosure(0.0, 0.0, mode, witness={"vectors": np.eye(T.m)[:, :k]})
    rng = np.random.default_rng(seed)
    cand = _candidate_directions(T, rng, n_random=2 * starts)
    _, _, vt = np.linalg.svd(T.A)
    svd_start = np.column_stack([_unit(T, v) for v in vt[:k]])
    inits = [svd_start]
    g = _greedy_chain(T, cand, k)
    if g is not None:
        inits.append(g)
    for _ in range(starts):
        idx = rng.choice(cand.shape[1], size=k, replace=False)
        inits.append(cand[:, idx])
    results = []
    for C in inits:
        if k > 1 and T.domain.is_polyhedral:
            C, v = _coordinate_ascent(T, C, cand)
        else:
            v = _d_value(T, C)
        results.append((v, C))
    results.sort(key=lambda t: -t[0])
    best_v, best_C = results[0]
    if polish is None:
        polish = not T.domain.is_polyhedral and T.p != 2.0
    if polish:
        for v0, C0 in results[:2]:
            C1, v1 = _polish(lambda M: _d_value(T, M), T, C0, maxfev=150 * k * T.m)
            if v1 > best_v:
                best_v, best_C = v1, C1
    # recompute the witness value from scratch
    best_v = _d_value(T, best_C)
    lo = best_v
    certified = T.p in (1.0, 2.0, INF)
    if mode == "net":
        net_hi = _net_E(T, k, net_h).hi
        hi = min(hi, net_hi)
    return VolumeEnclosure(lo, max(hi, lo) if not certified else hi, mode, certified,
                           witness={"vectors": T.B @ best_C})


# ---------------------------------------------------------------------------
# E_k


def _det_max_enumerate(G: np.ndarray, k: int):
    """Largest ``|det|`` of a ``k x k`` submatrix of ``G`` and its row/column indices."""
    nr, nc = G.shape
    if nr < k or nc < k:
        return 0.0, None, None
    rows = np.array(list(itertools.combinations(range(nr), k)), dtype=int)
    cols = np.array(list(itertools.combinations(range(nc), k)), dtype=int)
    best, arg = -1.0, (None, None)
    chunk = max(1, 200_000 // max(1, len(cols)))
    for start in range(0, len(rows), chunk):
        r = rows[start:start + chunk]
        blocks = G[r[:, None, :, None], cols[None, :, None, :]]
        dets = np.abs(np.linalg.det(blocks)) if k > 1 else np.abs(blocks[..., 0, 0])
        i = np.unravel_index(int(np.argmax(dets)), dets.shape)
        if dets[i] > best:
            best, arg = float(dets[i]), (r[i[0]], cols[i[1]])
    return best, arg[0], arg[1]


def _dual_ball_vertices(T: LinearMap) -> np.ndarray:
    """Vertices (one per +/- pair) of the dual unit ball of the codomain."""
    d = T.codomain.dim
    if T.codomain.q == 1.0:
        return np.eye(d)
    return ball_vertices(np.eye(d), INF)


def _e_alternating(T: LinearMap, X: np.ndarray, Th: np.ndarray, iters: int = 200):
    """Block-coordinate ascent of ``det(theta_i(T x_j))``; each block update is exact."""
    A = T.A
    q = T.codomain.q
    dual_dom = NormedSpace(T.m, T.domain.q)
    restricted = T.restriction is not None
    val = abs(np.linalg.det(Th.T @ A @ X))
    for _ in range(iters):
        old = val
        k = X.shape[1]
        for j in range(k):
            U = Th.T @ A @ X
            adj = _adjugate(U)
            g = A.T @ Th @ adj[j, :]
            if not np.any(g):
                continue
            if restricted:
                # maximise g.c over {||Bc||_p <= 1}: maximise over the ambient ball
                gx = T.B @ g
                x = norming_functional(gx, NormedSpace(T.domain.dim, T.domain.q))
                c = T.B.T @ x
                X[:, j] = _unit(T, c)
            else:
                X[:, j] = norming_functional(g, dual_dom)
        for i in range(k):
            U = Th.T @ A @ X
            adj = _adjugate(U)
            h = A @ X @ adj[:, i]
            if not np.any(h):
                continue
            Th[:, i] = norming_functional(h, NormedSpace(T.codomain.dim, T.p))
        val = abs(np.linalg.det(Th.T @ A @ X))
        if val <= old * (1 + 1e-12):
            break
    return X, Th, val


def _adjugate(U: np.ndarray) -> np.ndarray:
    k = U.shape[0]
    if k == 1:
        return np.ones((1, 1))
    s = np.linalg.svd(U, compute_uv=False)
    if s[-1] > 1e-8 * s[0]:
        return np.linalg.det(U) * np.linalg.inv(U)
    adj = np.empty_like(U)
    for i in range(k):
        for j in range(k):
            minor = np.delete(np.delete(U, i, axis=0), j, axis=1)
            adj[j, i] = (-1) ** (i + j) * np.linalg.det(minor)
    return adj


def _net_E(T: LinearMap, k: int, h: float) -> VolumeEnclosure:
    if T.restriction is not None or T.domain.dim > 4 or T.codomain.dim > 4:
        raise ValueError("net mode needs an unrestricted map with dimensions <= 4")
    Nx = sphere_net(T.domain.dim, h)
    Nt = sphere_net(T.codomain.dim, h)
    if math.comb(Nx.shape[1], k) * math.comb(Nt.shape[1], k) > NET_BUDGET:
        raise ValueError("net too large for the evaluation budget; use optimize mode")
    p, q = T.p, T.codomain.q
    Nx = Nx / np.linalg.norm(Nx, ord=p, axis=0)
    Nt = Nt / np.linalg.norm(Nt, ord=q, axis=0)
    inv = lambda e: 0.0 if e == INF else 1.0 / e
    eps_x = T.domain.dim ** inv(p) * h
    eps_t = T.codomain.dim ** inv(q) * h
    G = Nt.T @ T.A @ Nx
    best, ri, ci = _det_max_enumerate(G, k)
    denom = 1.0 - k * (eps_x + eps_t)
    hi = best / denom if denom > 0 else INF
    return VolumeEnclosure(best, hi, "net",
                           witness={"vectors": Nx[:, ci], "functionals": Nt[:, ri]})


def E_k(T: LinearMap, k: int, mode: str = "optimize", *, starts: int = 32, seed: int = 0,
        net_h: float = 0.05) -> VolumeEnclosure:
    """``sup det(theta_i(T x_j))`` over unit ``x_j`` and unit dual ``theta_i``."""
    _check_k(T, k, mode)
    A = T.A
    s = _svals(T)
    prod_s = float(np.prod(s[:k]))
    u, _, vt = np.linalg.svd(A)
    if mode == "euclidean-exact":
        return VolumeEnclosure(prod_s, prod_s, mode,
                               witness={"vectors": vt[:k].T, "functionals": u[:, :k]})
    if k > T.codomain.dim:
        return VolumeEnclosure(0.0, 0.0, mode, witness={})
    hi = _dual_euclid_factor(T) ** k * prod_s
    # exact enumeration over vertices when affordable
    if T.domain.is_polyhedral and vertex_count(T.domain.dim, T.m, T.p) <= 4096:
        X = _domain_vertices(T)
        Th = _dual_ball_vertices(T)
        if math.comb(X.shape[1], k) * math.comb(Th.shape[1], k) <= NET_BUDGET:
            G = Th.T @ A @ X
            best, ri, ci = _det_max_enumerate(G, k)
            wit = {"vectors": T.B @ X[:, ci], "functionals": Th[:, ri]} if ri is not None else {}
            return VolumeEnclosure(best, best, mode, witness=wit)
    rng = np.random.default_rng(seed)
    inits = [(np.column_stack([_unit(T, v) for v in vt[:k]]), None)]
    for _ in range(starts):
        inits.append((np.column_stack([_unit(T, c) for c in rng.standard_normal((k, T.m))]), None))
    best = (-1.0, None, None)
    for X0, _ in inits:
        Y = A @ X0
        Th0 = np.column_stack([
            norming_functional(y, T.codomain) if np.any(y) else np.eye(T.codomain.dim)[:, 0]
            for y in Y.T])
        X1, Th1, v = _e_alternating(T, X0.copy(), Th0)
        if v > best[0]:
            best = (v, X1, Th1)
        if best[0] >= hi * (1 - 1e-12):
            break  # attains the upper bound; further starts cannot improve
    lo = best[0]
    certified = T.p in (1.0, 2.0, INF)
    if mode == "net":
        net = _net_E(T, k, net_h)
        lo, hi = max(lo, net.lo), min(hi, net.hi)
    return VolumeEnclosure(lo, hi if certified else max(hi, lo), mode, certified,
                           witness={"vectors": T.B @ best[1], "functionals": best[2]})


# ---------------------------------------------------------------------------
# F_k


def restricted_min_norm(T: LinearMap, F: np.ndarray) -> tuple[float, np.ndarray]:
    """``inf {||T v|| : v in span(B F), ||v|| = 1}`` and a minimiser (domain coefficients).

    Exact for p in {1, 2, inf}; ``F`` is an ``m x k`` coefficient frame.
    """
    F = np.linalg.qr(F)[0] if F.shape[1] else F
    AF = T.A @ F
    BF = T.B @ F
    k = F.shape[1]
    p = T.p
    sv = np.linalg.svd(AF, compute_uv=False)
    scale = max(float(np.abs(T.A).max()), 1e-300)
    if sv[-1] <= 1e-13 * scale * max(1.0, sv[0] / scale):
        _, _, vt = np.linalg.svd(AF)
        c = F @ vt[-1]
        return 0.0, _unit(T, c)
    if p == 2.0:
        # BF has orthonormal columns
        _, s, vt = np.linalg.svd(AF)
        return float(s[-1]), F @ vt[-1]
    if T.domain.is_polyhedral and vertex_count(T.codomain.dim, k, p) <= MAX_VERTICES:
        C = ball_vertices(AF, p)
        vals = np.linalg.norm(BF @ C, ord=p, axis=0)
        j = int(np.argmax(vals))
        c = F @ C[:, j]
        return float(1.0 / vals[j]), _unit(T, c)
    # general p: minimise the ratio (upper estimate of the infimum)
    def ratio(a):
        return np.linalg.norm(AF @ a, ord=p) / np.linalg.norm(BF @ a, ord=p)

    _, _, vt = np.linalg.svd(AF)
    if k == 1:
        return float(ratio(vt[0])), _unit(T, F @ vt[0])
    # batched sampling, then local refinement of the two best directions
    rng = np.random.default_rng(0)
    cand = np.column_stack([vt[-1][:, None], rng.standard_normal((k, 128 * k))])
    vals = np.linalg.norm(AF @ cand, ord=p, axis=0) / np.linalg.norm(BF @ cand, ord=p, axis=0)
    order = np.argsort(vals)
    best = (float(vals[order[0]]), cand[:, order[0]])
    for j in order[:2]:
        res = optimize.minimize(ratio, cand[:, j], method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-15, "maxfev": 200 * k})
        if res.fun < best[0]:
            best = (float(res.fun), res.x)
    return float(best[0]), _unit(T, F @ best[1])


def _chart(F0: np.ndarray):
    """Local chart of the Grassmannian around ``span(F0)``."""
    m, k = F0.shape
    Q, _ = np.linalg.qr(F0, mode="complete")
    base, perp = Q[:, :k], Q[:, k:]

    def frame(x):
        return base + perp @ x.reshape(m - k, k)

    return frame, (m - k) * k


def F_k(T: LinearMap, k: int, mode: str = "optimize", *, starts: int = 4, seed: int = 0,
        polish: bool | None = None, net_h: float = 0.05) -> VolumeEnclosure:
    """``sup_{dim V = k} inf_{v in V, ||v|| = 1} ||T v||``.

    The witness ``frame`` (domain coordinates) spans the best ``V`` found.
    """
    _check_k(T, k, mode)
    s = _svals(T)
    _, _, vt = np.linalg.svd(T.A)
    if mode == "euclidean-exact":
        return VolumeEnclosure(float(s[k - 1]), float(s[k - 1]), mode,
                               witness={"frame": vt[:k].T})
    nlo, nhi, nvec = operator_norm(T)
    hi = min(_euclid_factor(T) * float(s[k - 1]), nhi)
    certified = T.p in (1.0, 2.0, INF)
    exact_inner = certified
    if k == 1 and nlo == nhi:
        return VolumeEnclosure(nlo, nhi, mode, witness={"frame": T.B @ nvec[:, None]})
    if k == T.m:
        val, _ = restricted_min_norm(T, np.eye(T.m))
        enc_hi = val if exact_inner else max(hi, val)
        return VolumeEnclosure(val, enc_hi, mode, certified,
                               witness={"frame": T.B.copy()})
    rng = np.random.default_rng(seed)
    frames = [vt[:k].T]
    coord = [np.eye(T.m)[:, list(c)] for c in itertools.combinations(range(T.m), k)]
    scored = sorted(((restricted_min_norm(T, F)[0], i) for i, F in enumerate(coord)),
                    key=lambda t: -t[0])
    frames += [coord[i] for _, i in scored[:2]]
    frames += [rng.standard_normal((T.m, k)) for _ in range(starts)]
    results = sorted(((restricted_min_norm(T, F)[0], F) for F in frames), key=lambda t: -t[0])
    best_v, best_F = results[0]
    if polish is None:
        polish = not T.domain.is_polyhedral and T.p != 2.0
    if polish:
        for v0, F0 in results[:2]:
            frame, n = _chart(F0)
            res = optimize.minimize(lambda x: -restricted_min_norm(T, frame(x))[0],
                                    np.zeros(n), method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": 1e-14,
                                             "maxfev": 60 * n + 60, "adaptive": True})
            if -res.fun > best_v:
                best_v, best_F = -res.fun, frame(res.x)
    best_F = np.linalg.qr(best_F)[0]
    lo, _ = restricted_min_norm(T, best_F)
    if mode == "net":
        # F_k <= E_k / E_{k-1} (multiplicative recursion of determinants)
        ek = _net_E(T, k, net_h).hi
        ek1 = E_k(T, k - 1).lo
        if ek1 > 0:
            hi = min(hi, ek / ek1)
    return VolumeEnclosure(lo, hi if certified else max(hi, lo), mode, certified,
                           witness={"frame": T.B @ best_F})


# ---------------------------------------------------------------------------
# inequality suite


@dataclass
class InequalityCheck:
    name: str
    k: int
    lhs: float
    rhs: float
    passed: bool
    witnesses: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, "k": self.k, "lhs": self.lhs, "rhs": self.rhs,
                "pass": self.passed, "witnesses": _jsonable(self.witnesses)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, VolumeEnclosure):
        return obj.to_json()
    return obj


@dataclass
class InequalityReport:
    p: float
    dim: int
    kmax: int
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_json(self) -> dict:
        return {"p": p_to_json(self.p), "dim": self.dim, "kmax": self.kmax,
                "pass": self.passed, "checks": [c.to_json() for c in self.checks]}


def _leq(lhs: float, rhs: float, slack: float = 1.0) -> bool:
    return bool(lhs <= rhs * slack * (1.0 + CHECK_RTOL) + CHECK_ATOL)


def verify_inequalities(T: LinearMap, S: LinearMap, V: Subspace | None, kmax: int,
                    mode: str = "optimize", *, seed: int = 0, starts: int = 3,
                    slack: float = 1.0) -> InequalityReport:
    """Evaluate the volume inequalities for ``T``, ``S`` and a subspace ``V``.

    Each check has the form ``lower(lhs) <= constant * upper(rhs)``.  ``slack``
    multiplies every right-hand side; values below 1 deliberately tighten the
    checks (negative control).
    """
    if T.domain != T.codomain or S.domain != T.codomain:
        raise ValueError("T and S must be endomorphisms of the same space")
    kmax = min(kmax, T.m)
    kw = dict(seed=seed, starts=starts)
    Ts = T.dual()
    ST = S.compose(T)
    D, Dd, E, Ed, F, DS, DST = {}, {}, {}, {}, {}, {}, {}
    for k in range(1, kmax + 1):
        D[k] = D_k(T, k, mode, **kw)
        Dd[k] = D_k(Ts, k, mode, **kw)
        E[k] = E_k(T, k, mode, **kw)
        Ed[k] = E_k(Ts, k, mode, **kw)
        F[k] = F_k(T, k, mode, **kw)
        DS[k] = D_k(S, k, mode, **kw)
        DST[k] = D_k(ST, k, mode, **kw)
    one = VolumeEnclosure(1.0, 1.0, "euclidean-exact")
    checks = []

    def add(name, k, lhs, rhs, **wit):
        checks.append(InequalityCheck(name, k, float(lhs), float(rhs), _leq(lhs, rhs, slack), wit))

    for k in range(1, kmax + 1):
        kf = math.factorial(k)
        add("submultiplicativity", k, DST[k].lo, DS[k].hi * D[k].hi,
            D_ST=DST[k], D_S=DS[k], D_T=D[k], vectors=DST[k].witness.get("vectors"))
        frame = F[k].witness.get("frame")
        if F[k].certified and frame is not None:
            M = F[k].lo
            add("expansion_implies_volume", k, M ** k, D[k].hi, M=M, frame=frame, D_T=D[k])
        add("volume_le_det", k, D[k].lo, E[k].hi, D_T=D[k], E_T=E[k],
            vectors=D[k].witness.get("vectors"))
        add("det_le_kfact_volume", k, E[k].lo, kf * D[k].hi, E_T=E[k], D_T=D[k],
            vectors=E[k].witness.get("vectors"), functionals=E[k].witness.get("functionals"))
        add("adjoint_volume_le_det", k, Dd[k].lo, E[k].hi, D_Tstar=Dd[k], E_T=E[k])
        add("det_le_kfact_adjoint_volume", k, E[k].lo, kf * Dd[k].hi, E_T=E[k], D_Tstar=Dd[k])
        add("adjoint_volume_le_adjoint_det", k, Dd[k].lo, Ed[k].hi, D_Tstar=Dd[k], E_Tstar=Ed[k])
        add("adjoint_det_le_kfact_adjoint_volume", k, Ed[k].lo, kf * Dd[k].hi, E_Tstar=Ed[k], D_Tstar=Dd[k])
        add("volume_le_adjoint_det", k, D[k].lo, Ed[k].hi, D_T=D[k], E_Tstar=Ed[k])
        add("adjoint_det_le_kfact_volume", k, Ed[k].lo, kf * D[k].hi, E_Tstar=Ed[k], D_T=D[k])
        add("volume_vs_adjoint_lower", k, D[k].lo, kf * Dd[k].hi, D_T=D[k], D_Tstar=Dd[k])
        add("volume_vs_adjoint_upper", k, Dd[k].lo, kf * D[k].hi, D_Tstar=Dd[k], D_T=D[k])
        Eprev = E[k - 1] if k > 1 else one
        add("det_recursion_lower", k, Eprev.lo * F[k].lo, E[k].hi, E_prev=Eprev, F=F[k], E=E[k])
        add("det_recursion_upper", k, E[k].lo, k * 2 ** (k - 1) * Eprev.hi * F[k].hi,
            E=E[k], E_prev=Eprev, F=F[k])
        if k > 1:
            add("expansion_monotone", k, F[k].lo, F[k - 1].hi, F=F[k], F_prev=F[k - 1])
        prod_lo = math.prod(F[i].lo for i in range(1, k + 1))
        prod_hi = math.prod(F[i].hi for i in range(1, k + 1))
        const = math.prod(i * 2 ** (i - 1) for i in range(1, k + 1))
        add("prodF_le_det", k, prod_lo, E[k].hi, prodF_lo=prod_lo, E=E[k])
        add("det_le_prodF", k, E[k].lo, const * prod_hi, E=E[k], prodF_hi=prod_hi)
        add("volume_le_prodF", k, D[k].lo, const * prod_hi, D_T=D[k], prodF_hi=prod_hi)
        add("prodF_le_volume", k, prod_lo, kf * D[k].hi, prodF_lo=prod_lo, D_T=D[k])
        add("adjoint_volume_le_prodF", k, Dd[k].lo, const * prod_hi, D_Tstar=Dd[k],
            prodF_hi=prod_hi)
    if D[1].lo == D[1].hi and Dd[1].lo == Dd[1].hi:
        a, b = D[1].lo, Dd[1].lo
        ratio = 1.0 if a == b else (a / b if b else INF)
        checks.append(InequalityCheck("adjoint_norm_equality", 1, a, b,
                                      abs(ratio - 1.0) <= 1e-12, {"ratio": ratio}))
    if V is not None:
        m = V.codim
        TV = T.restrict(V)
        for k in range(m + 1, kmax + 1):
            Dm = D[m] if m >= 1 else one
            DV = D_k(TV, k - m, mode, **kw)
            const = (2 * (math.sqrt(m) + 2)) ** k * math.factorial(k)
            add("finite_codimension_split", k, D[k].lo, const * Dm.hi * DV.hi,
                m=m, D_T=D[k], D_m=Dm, D_restricted=DV)
    return InequalityReport(T.p, T.domain.dim, kmax, checks)
