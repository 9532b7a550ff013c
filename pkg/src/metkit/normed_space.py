"""Finite-dimensional l^p geometry.

Vectors and functionals are plain float arrays; the :class:`NormedSpace` they
belong to is passed alongside (or carried by a :class:`Subspace`).  Subspaces
keep a Euclidean-orthonormal basis whatever ``p`` is; the norm only enters
through norms and distances.

For ``p`` in ``{1, inf}`` all sup/inf problems below are solved exactly by
enumerating vertices of polytopes of the form ``{c : ||M c||_p <= 1}``.
"""
from __future__ import annotations

import itertools
import math
from functools import cached_property, lru_cache

import numpy as np
from scipy import optimize

INF = math.inf
RANK_TOL = 1e-9
DIST_TOL = 1e-10
# enumeration beyond this many candidate vertices falls back to optimisation
MAX_VERTICES = 200_000


def dual_exponent(p: float) -> float:
    p = float(p)
    if p == 1.0:
        return INF
    if p == INF:
        return 1.0
    return p / (p - 1.0)


def parse_p(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return INF
        value = float(value)
    p = float(value)
    if not p >= 1.0:
        raise ValueError(f"norm exponent must be >= 1, got {value!r}")
    return p


def p_to_json(p: float):
    return "inf" if p == INF else (int(p) if float(p).is_integer() else float(p))


def lp_norm(x, p: float, axis=None):
    x = np.asarray(x, dtype=float)
    if axis is None:
        return float(np.linalg.norm(x.ravel(), ord=p)) if x.size else 0.0
    return np.linalg.norm(x, ord=p, axis=axis)


class NormedSpace:
    """``R^dim`` with the l^p norm; ``p = inf`` is an exact separate case."""

    __slots__ = ("dim", "p")

    def __init__(self, dim: int, p: float = 2.0):
        if int(dim) != dim or dim < 1:
            raise ValueError(f"dimension must be a positive integer, got {dim!r}")
        object.__setattr__(self, "dim", int(dim))
        object.__setattr__(self, "p", parse_p(p))

    def __setattr__(self, name, value):
        raise AttributeError("NormedSpace is immutable")

    def __eq__(self, other):
        return isinstance(other, NormedSpace) and (self.dim, self.p) == (other.dim, other.p)

    def __hash__(self):
        return hash((self.dim, self.p))

    def __repr__(self):
        return f"NormedSpace(dim={self.dim}, p={p_to_json(self.p)!r})"

    @property
    def q(self) -> float:
        return dual_exponent(self.p)

    @property
    def is_polyhedral(self) -> bool:
        return self.p in (1.0, INF)

    def dual(self) -> "NormedSpace":
        return NormedSpace(self.dim, self.q)

    def norm(self, x) -> float:
        return lp_norm(x, self.p)

    def dual_norm(self, theta) -> float:
        return lp_norm(theta, self.q)

    def check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("vector has non-finite entries")
        return x

    def to_json(self) -> dict:
        return {"dim": self.dim, "p": p_to_json(self.p)}

    @classmethod
    def from_json(cls, data: dict) -> "NormedSpace":
        return cls(data["dim"], parse_p(data["p"]))


def norm(x, space: NormedSpace) -> float:
    return space.norm(space.check(x))


# ---------------------------------------------------------------------------
# vertex enumeration


@lru_cache(maxsize=None)
def _subsets(n: int, r: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(n), r)), dtype=int).reshape(-1, r)


@lru_cache(maxsize=None)
def _sign_patterns(m: int) -> np.ndarray:
    # one representative per +/- pair, as columns
    rows = [(1.0, *rest) for rest in itertools.product((1.0, -1.0), repeat=m - 1)]
    return np.array(rows, dtype=float).T


def vertex_count(d: int, m: int, p: float) -> int:
    if m == 0:
        return 0
    if p == INF:
        return math.comb(d, m) * 2 ** (m - 1)
    return math.comb(d, m - 1)


def ball_vertices(M, p: float) -> np.ndarray:
    """Vertices, one per +/- pair, of ``{c : ||M c||_p <= 1}`` for p in {1, inf}.

    ``M`` is ``d x m`` of full column rank.  Returns an ``m x N`` array of
    coefficient vectors normalised so that ``||M c||_p = 1``.  For ``p = 1`` the
    vertices are the minimal-support vectors of ``range(M)``; for ``p = inf``
    they solve ``M_S c = s`` on ``m`` rows with a feasible sign pattern ``s``.
    The returned set may contain extra boundary points, never interior ones.
    """
    M = np.asarray(M, dtype=float)
    d, m = M.shape
    if m == 0:
        return np.zeros((0, 0))
    if vertex_count(d, m, p) > MAX_VERTICES:
        raise ValueError("too many vertices to enumerate")
    scale = float(np.abs(M).max())
    if scale == 0.0:
        raise ValueError("matrix is zero")
    if p == INF:
        blocks = M[_subsets(d, m)]
        sv = np.linalg.svd(blocks, compute_uv=False)
        blocks = blocks[sv[:, -1] > 1e-10 * scale]
        signs = _sign_patterns(m)
        rhs = np.broadcast_to(signs, (len(blocks), m, signs.shape[1]))
        C = np.linalg.solve(blocks, rhs).transpose(0, 2, 1).reshape(-1, m).T
        Z = np.abs(M @ C).max(axis=0)
        C = C[:, Z <= 1.0 + 1e-9]
        return C / np.abs(M @ C).max(axis=0)
    if p == 1.0:
        if m == 1:
            C = np.ones((1, 1))
        else:
            blocks = M[_subsets(d, m - 1)]
            _, s, vt = np.linalg.svd(blocks)
            C = vt[s[:, -1] > 1e-10 * scale, -1, :].T
        n1 = np.abs(M @ C).sum(axis=0)
        C = C[:, n1 > 1e-12 * scale]
        return C / np.abs(M @ C).sum(axis=0)
    raise ValueError(f"vertex enumeration needs p in {{1, inf}}, got {p}")


def _nonsingular(blocks: np.ndarray) -> np.ndarray:
    # relative to the Hadamard bound, so the test is scale free
    det = np.abs(np.linalg.det(blocks))
    had = np.prod(np.linalg.norm(blocks, axis=-1), axis=-1)
    return det > 1e-10 * had


def poly_distance(y, W, p: float) -> float:
    """``min_c ||y - W c||_p`` for p in {1, inf} by enumerating basic solutions.

    ``W`` (``d x j``) must have full column rank.  For p = 1 some optimum has
    ``j`` zero residuals; for p = inf some optimum has ``j + 1`` residuals of
    equal magnitude.  Every candidate is scored with the true objective, so
    the minimum is exact.
    """
    y = np.asarray(y, dtype=float)
    W = np.asarray(W, dtype=float)
    d, j = W.shape
    if j == 0:
        return float(np.linalg.norm(y, ord=p))
    if j >= d:
        return 0.0
    if p == 1.0:
        S = _subsets(d, j)
        blocks = W[S]
        ok = _nonsingular(blocks)
        c = np.linalg.solve(blocks[ok], y[S[ok]][..., None])[..., 0]
    elif p == INF:
        S = _subsets(d, j + 1)
        signs = _sign_patterns(j + 1)                          # (j+1, 2^j)
        nS, nP = len(S), signs.shape[1]
        WS = np.broadcast_to(W[S][:, None], (nS, nP, j + 1, j))
        sg = np.broadcast_to(signs.T[None, :, :, None], (nS, nP, j + 1, 1))
        blocks = np.concatenate([WS, sg], axis=-1).reshape(-1, j + 1, j + 1)
        rhs = np.broadcast_to(y[S][:, None, :], (nS, nP, j + 1)).reshape(-1, j + 1)
        ok = _nonsingular(blocks)
        c = np.linalg.solve(blocks[ok], rhs[ok][..., None])[..., :j, 0]
    else:
        raise ValueError(f"p must be 1 or inf, got {p}")
    if len(c) == 0:
        raise ValueError("W is rank deficient")
    r = y[None, :] - c @ W.T
    return float(np.linalg.norm(r, ord=p, axis=1).min())


# ---------------------------------------------------------------------------
# subspaces


def _orthonormalize(vectors: np.ndarray, tol: float = RANK_TOL, strict: bool = True) -> np.ndarray:
    d, k = vectors.shape
    if k == 0:
        return np.zeros((d, 0))
    u, s, _ = np.linalg.svd(vectors, full_matrices=False)
    if s[0] == 0.0:
        if strict:
            raise ValueError("basis is rank deficient")
        return np.zeros((d, 0))
    keep = s > tol * s[0]
    if strict and not keep.all():
        raise ValueError(
            f"basis is rank deficient (smallest/largest singular value {s[-1] / s[0]:.3g})")
    return u[:, keep]


class Subspace:
    """A linear subspace of a :class:`NormedSpace` with orthonormal basis columns."""

    def __init__(self, space: NormedSpace, vectors=None, *, orthonormal: bool = False):
        self.space = space
        if vectors is None:
            basis = np.zeros((space.dim, 0))
        else:
            basis = np.asarray(vectors, dtype=float)
            if basis.ndim == 1:
                basis = basis[:, None]
            if basis.shape[0] != space.dim:
                raise ValueError(f"basis has {basis.shape[0]} rows, space has dimension {space.dim}")
            if not np.all(np.isfinite(basis)):
                raise ValueError("basis has non-finite entries")
            if not orthonormal:
                basis = _orthonormalize(basis)
        basis = np.array(basis)
        basis.flags.writeable = False
        self.basis = basis

    @classmethod
    def span(cls, space: NormedSpace, vectors, tol: float = RANK_TOL) -> "Subspace":
        """Span of possibly dependent vectors (columns), dropping directions below ``tol``."""
        vectors = np.asarray(vectors, dtype=float).reshape(space.dim, -1)
        return cls(space, _orthonormalize(vectors, tol, strict=False), orthonormal=True)

    @classmethod
    def full(cls, space: NormedSpace) -> "Subspace":
        return cls(space, np.eye(space.dim), orthonormal=True)

    @classmethod
    def zero(cls, space: NormedSpace) -> "Subspace":
        return cls(space)

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def codim(self) -> int:
        return self.space.dim - self.k

    @cached_property
    def complement(self) -> np.ndarray:
        """Orthonormal basis of the Euclidean orthogonal complement."""
        if self.k == 0:
            return np.eye(self.space.dim)
        u, _, _ = np.linalg.svd(self.basis, full_matrices=True)
        return u[:, self.k:]

    @cached_property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    @cached_property
    def _dual_vertices(self) -> np.ndarray:
        # vertices of (annihilator) ∩ (dual unit ball), as functionals (columns)
        N = self.complement
        if N.shape[1] == 0:
            return np.zeros((self.space.dim, 0))
        return N @ ball_vertices(N, self.space.q)

    @cached_property
    def _ball_vertices(self) -> np.ndarray:
        # vertices of the unit-ball section, as vectors (columns)
        if self.k == 0:
            return np.zeros((self.space.dim, 0))
        return self.basis @ ball_vertices(self.basis, self.space.p)

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        scale = np.linalg.norm(x)
        return scale == 0.0 or np.linalg.norm(x - self.projector @ x) <= tol * scale

    def __repr__(self):
        return f"Subspace(dim={self.k}, {self.space!r})"

    def to_json(self) -> dict:
        return {"space": self.space.to_json(), "k": self.k, "basis": self.basis.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Subspace":
        space = NormedSpace.from_json(data["space"])
        basis = np.asarray(data["basis"], dtype=float).reshape(space.dim, int(data["k"]))
        return cls(space, basis)


def _same_space(*subspaces: Subspace) -> NormedSpace:
    space = subspaces[0].space
    for W in subspaces[1:]:
        if W.space != space:
            raise ValueError(f"subspaces live in different spaces: {space!r} vs {W.space!r}")
    return space


# ---------------------------------------------------------------------------
# distances


def _general_residual(x: np.ndarray, B: np.ndarray, p: float) -> np.ndarray:
    c0 = B.T @ x

    def fun(c):
        r = x - B @ c
        nr = np.linalg.norm(r, ord=p)
        if nr == 0.0:
            return 0.0, np.zeros_like(c)
        g = np.sign(r) * (np.abs(r) / nr) ** (p - 1.0)
        return nr, -B.T @ g

    res = optimize.minimize(fun, c0, jac=True, method="BFGS",
                            options={"gtol": 1e-13, "maxiter": 2000})
    return x - B @ res.x


def distance_certificate(x, W: Subspace) -> tuple[float, np.ndarray]:
    """``d(x, W)`` together with a unit dual functional vanishing on ``W`` attaining it."""
    space = W.space
    x = space.check(x)
    d = space.dim
    if W.k == d:
        return 0.0, np.zeros(d)
    p = space.p
    if p == 2.0:
        r = x - W.projector @ x
        dist = float(np.linalg.norm(r))
        if dist == 0.0:
            return 0.0, W.complement[:, 0].copy()
        return dist, r / dist
    if space.is_polyhedral:
        Phi = W._dual_vertices
        vals = Phi.T @ x
        i = int(np.argmax(np.abs(vals)))
        theta = Phi[:, i] * (1.0 if vals[i] >= 0 else -1.0)
        return float(abs(vals[i])), theta
    if W.k == 0:
        r = x
    else:
        r = _general_residual(x, W.basis, p)
    dist = float(np.linalg.norm(r, ord=p))
    if dist == 0.0:
        return 0.0, W.complement[:, 0] / np.linalg.norm(W.complement[:, 0], ord=space.q)
    theta = np.sign(r) * (np.abs(r) / dist) ** (p - 1.0)
    # remove the optimiser's residual component along W
    theta = theta - W.projector @ theta
    theta /= np.linalg.norm(theta, ord=space.q)
    return dist, theta


def dist_to_subspace(x, W: Subspace) -> float:
    """``min_c ||x - basis c||_p``."""
    return distance_certificate(x, W)[0]


def norming_functional(x, space: NormedSpace) -> np.ndarray:
    """Unit dual functional ``theta`` with ``theta(x) = ||x||``."""
    x = space.check(x)
    nx = space.norm(x)
    if nx == 0.0:
        raise ValueError("zero vector has no norming functional")
    p = space.p
    if p == INF:
        i = int(np.argmax(np.abs(x)))  # first maximal coordinate
        theta = np.zeros_like(x)
        theta[i] = np.sign(x[i])
        return theta
    if p == 1.0:
        return np.sign(x)
    return np.sign(x) * (np.abs(x) / nx) ** (p - 1.0)


def annihilator(W: Subspace) -> Subspace:
    """Functionals vanishing on ``W``, as a subspace of the dual space."""
    return Subspace(W.space.dual(), W.complement, orthonormal=True)


def intersect(U: Subspace, W: Subspace, tol: float = RANK_TOL) -> Subspace:
    space = _same_space(U, W)
    if U.k == 0 or W.k == 0:
        return Subspace.zero(space)
    M = np.hstack([U.basis, -W.basis])
    _, s, vt = np.linalg.svd(M)
    s_full = np.zeros(M.shape[1])
    s_full[: len(s)] = s
    null = vt[s_full <= tol * s_full[0]]
    if len(null) == 0:
        return Subspace.zero(space)
    return Subspace.span(space, U.basis @ null[:, : U.k].T)


# ---------------------------------------------------------------------------
# sup over unit spheres


def sphere_net(k: int, h: float = 0.05) -> np.ndarray:
    """Grid on the faces of ``[-1, 1]^k`` (one of each +/- pair), as columns.

    Every point of the cube surface lies within sup-distance ``h / 2`` of the net.
    """
    if k == 1:
        return np.ones((1, 1))
    n = int(math.ceil(2.0 / h)) + 1
    ticks = np.linspace(-1.0, 1.0, n)
    grid = np.array(list(itertools.product(ticks, repeat=k - 1))).T
    faces = []
    for axis in range(k):
        pts = np.insert(grid, axis, 1.0, axis=0)
        faces.append(pts)
    return np.hstack(faces)


def _maximize_on_sphere(fun, B: np.ndarray, p: float, *, starts: int = 32,
                        seed: int = 0, net_h: float | None = None):
    """Maximise ``fun(z)`` over unit-norm ``z`` in ``range(B)`` by multi-start search.

    Lower bound only; used for norms without an exact enumeration.
    """
    k = B.shape[1]
    rng = np.random.default_rng(seed)

    def unit(c):
        z = B @ c
        nz = np.linalg.norm(z, ord=p)
        return z / nz if nz > 0 else None

    cands = [np.eye(k)[:, i] for i in range(k)] + list(rng.standard_normal((starts, k)))
    if net_h is not None and k <= 4:
        cands += list(sphere_net(k, net_h).T)
    scored = []
    for c in cands:
        z = unit(c)
        if z is not None:
            scored.append((fun(z), tuple(c)))
    scored.sort(key=lambda t: -t[0])
    best_val, best_c = scored[0][0], np.array(scored[0][1])
    if k > 1:
        for _, c0 in scored[: min(4, len(scored))]:
            res = optimize.minimize(lambda c: -fun(unit(c)) if unit(c) is not None else 0.0,
                                    np.array(c0), method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": 1e-13, "maxfev": 400 * k})
            if -res.fun > best_val:
                best_val, best_c = -res.fun, res.x
    return float(best_val), unit(best_c)


def max_dist_on_sphere(U: Subspace, W: Subspace) -> tuple[float, np.ndarray]:
    """``sup { d(z, W) : z in U, ||z|| = 1 }`` and a maximiser."""
    space = _same_space(U, W)
    if U.k == 0:
        raise ValueError("the zero subspace has an empty unit sphere")
    if W.k == 0:
        z = U.basis[:, 0] / space.norm(U.basis[:, 0])
        return 1.0, z
    p = space.p
    if p == 2.0:
        M = U.basis - W.projector @ U.basis
        _, s, vt = np.linalg.svd(M, full_matrices=False)
        return float(s[0]), U.basis @ vt[0]
    if space.is_polyhedral and vertex_count(space.dim, U.k, p) <= MAX_VERTICES:
        Z = U._ball_vertices
        if W.k == space.dim:
            return 0.0, Z[:, 0]
        vals = np.abs(W._dual_vertices.T @ Z).max(axis=0)
        j = int(np.argmax(vals))
        return float(vals[j]), Z[:, j]
    return _maximize_on_sphere(lambda z: dist_to_subspace(z, W), U.basis, p, net_h=0.05)


def riesz_point(V: Subspace, W: Subspace) -> tuple[np.ndarray, float]:
    """Unit ``z`` in ``V`` maximising ``d(z, W)``.

    The maximum equals 1 whenever ``dim V > dim W`` (Gohberg-Krein); with only
    ``dim V > dim (V ∩ W)`` it is positive but may be smaller.
    """
    _same_space(V, W)
    if V.k <= intersect(V, W).k:
        raise ValueError("V must not be contained in W")
    value, z = max_dist_on_sphere(V, W)
    return z, value


def _dist_to_section(y: np.ndarray, W: Subspace) -> float:
    """Distance from ``y`` to the unit-ball section ``W ∩ B``."""
    space = W.space
    p = space.p
    if W.k == 0:
        return space.norm(y)
    if p == 2.0:
        return float(np.linalg.norm(y - W.projector @ y)) if np.linalg.norm(W.basis.T @ y) <= 1.0 \
            else float(np.linalg.norm(y - W.basis @ (W.basis.T @ y) / np.linalg.norm(W.basis.T @ y)))
    B = W.basis
    d, k = B.shape
    if space.is_polyhedral:
        from scipy.optimize import linprog
        if p == INF:
            # vars: c (k), t
            cost = np.r_[np.zeros(k), 1.0]
            ones = np.ones((d, 1))
            A = np.block([[-B, -ones], [B, -ones], [B, np.zeros((d, 1))], [-B, np.zeros((d, 1))]])
            b = np.r_[-y, y, np.ones(d), np.ones(d)]
        else:
            # vars: c (k), r (d) >= |y - Bc|, u (d) >= |Bc|
            cost = np.r_[np.zeros(k), np.ones(d), np.zeros(d)]
            I, Z = np.eye(d), np.zeros((d, d))
            A = np.block([[-B, -I, Z], [B, -I, Z], [B, Z, -I], [-B, Z, -I],
                          [np.zeros((1, k)), np.zeros((1, d)), np.ones((1, d))]])
            b = np.r_[-y, y, np.zeros(d), np.zeros(d), 1.0]
        res = linprog(cost, A_ub=A, b_ub=b, bounds=(None, None), method="highs")
        if res.status != 0:
            raise RuntimeError(f"linear program failed: {res.message}")
        return float(res.fun)
    cons = {"type": "ineq", "fun": lambda c: 1.0 - np.linalg.norm(B @ c, ord=p)}
    c0 = B.T @ y
    c0 = c0 / max(1.0, np.linalg.norm(B @ c0, ord=p))
    res = optimize.minimize(lambda c: np.linalg.norm(y - B @ c, ord=p), c0,
                            constraints=[cons], method="SLSQP",
                            options={"ftol": 1e-12, "maxiter": 500})
    return float(res.fun)


def _one_sided_hausdorff(U: Subspace, W: Subspace) -> float:
    space = U.space
    if U.k == 0:
        return 0.0
    if space.is_polyhedral and vertex_count(space.dim, U.k, space.p) <= MAX_VERTICES:
        return max(_dist_to_section(z, W) for z in U._ball_vertices.T)
    return _maximize_on_sphere(lambda z: _dist_to_section(z, W), U.basis, space.p,
                               net_h=0.05)[0]


def grassmann_distance(U: Subspace, W: Subspace) -> float:
    """Hausdorff distance between the unit-ball sections of ``U`` and ``W``."""
    space = _same_space(U, W)
    if space.p == 2.0:
        a = np.linalg.norm(U.basis - W.projector @ U.basis, 2) if U.k else 0.0
        b = np.linalg.norm(W.basis - U.projector @ W.basis, 2) if W.k else 0.0
        return float(min(1.0, max(a, b)))
    return float(max(_one_sided_hausdorff(U, W), _one_sided_hausdorff(W, U)))
