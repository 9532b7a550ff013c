"""Greedy consistent sequences of vectors and functionals for a single map.

At order k the construction takes the best k-dimensional frame ``V`` found
for ``F_k``, picks ``x_k`` in ``V`` whose image is at distance ``||T x_k||``
from the previous images, and lets ``theta_k`` be the distance certificate of
``T x_k``: unit dual norm, vanishing on the previous images.  The matrix
``theta_i(T x_j)`` is therefore upper triangular.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .normed_space import (
    INF,
    NormedSpace,
    Subspace,
    distance_certificate,
    p_to_json,
    parse_p,
    riesz_point,
)
from .volume import F_k, LinearMap, restricted_min_norm

DEGENERATE_RTOL = 1e-12


@dataclass
class ConsistentSeq:
    p: float
    xs: list = field(default_factory=list)          # unit vectors (ambient domain coordinates)
    thetas: list = field(default_factory=list)      # unit functionals on the codomain
    dets: list = field(default_factory=list)        # det(theta_i(T x_j))_{i,j<=k}
    expansion_certs: list = field(default_factory=list)
    F_lo: list = field(default_factory=list)        # F_k(T).lo used at step k
    degenerate: bool = False
    degenerate_at: int | None = None

    @property
    def k(self) -> int:
        return len(self.xs)

    def X(self) -> np.ndarray:
        return np.column_stack(self.xs) if self.xs else np.zeros((0, 0))

    def Theta(self) -> np.ndarray:
        return np.column_stack(self.thetas) if self.thetas else np.zeros((0, 0))

    def to_json(self) -> dict:
        return {
            "p": p_to_json(self.p),
            "xs": [np.asarray(x).tolist() for x in self.xs],
            "thetas": [np.asarray(t).tolist() for t in self.thetas],
            "dets": list(map(float, self.dets)),
            "expansion_certs": list(map(float, self.expansion_certs)),
            "F_lo": list(map(float, self.F_lo)),
            "degenerate": self.degenerate,
            "degenerate_at": self.degenerate_at,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ConsistentSeq":
        return cls(parse_p(data["p"]),
                   [np.asarray(x, dtype=float) for x in data["xs"]],
                   [np.asarray(t, dtype=float) for t in data["thetas"]],
                   list(data["dets"]), list(data["expansion_certs"]), list(data["F_lo"]),
                   bool(data["degenerate"]), data["degenerate_at"])


def _exact_inner(p: float) -> bool:
    return p in (1.0, 2.0, INF)


def build(T: LinearMap, kmax: int, *, seed: int = 0, starts: int = 4) -> ConsistentSeq:
    """Consistent sequences up to order ``kmax`` (or until ``F_k`` vanishes)."""
    if T.restriction is not None:
        raise ValueError("build expects an unrestricted map")
    if not 1 <= kmax <= T.m:
        raise ValueError(f"kmax must be in [1, {T.m}], got {kmax}")
    p = T.p
    A = T.matrix
    scale = float(np.abs(A).max()) if A.size else 0.0
    seq = ConsistentSeq(p)
    cert_prev = INF
    for k in range(1, kmax + 1):
        Fk = F_k(T, k, seed=seed, starts=starts)
        if Fk.lo <= DEGENERATE_RTOL * max(scale, 1e-300) or scale == 0.0:
            seq.degenerate, seq.degenerate_at = True, k
            break
        frame = Fk.witness["frame"]                      # d x k, ambient coordinates
        images = A @ frame
        TV = Subspace(T.codomain, images)
        if k == 1:
            W = Subspace.zero(T.codomain)
        else:
            W = Subspace(T.codomain, A @ np.column_stack(seq.xs))
        z, _ = riesz_point(TV, W)
        a, *_ = np.linalg.lstsq(images, z, rcond=None)
        x = frame @ a
        x = x / np.linalg.norm(x, ord=p)
        Tx = A @ x
        dist, theta = distance_certificate(Tx, W)
        seq.xs.append(x)
        seq.thetas.append(theta)
        seq.F_lo.append(float(Fk.lo))
        X, Th = seq.X(), seq.Theta()
        seq.dets.append(float(abs(np.linalg.det(Th.T @ A @ X))))
        # ||T(y + a x_k)|| >= |a| dist  and  >= cert_prev ||y|| - |a| ||T x_k||
        n = float(np.linalg.norm(Tx, ord=p))
        rough = n if k == 1 else cert_prev * dist / (cert_prev + n + dist)
        cert = rough
        if _exact_inner(p):
            cert = max(cert, restricted_min_norm(T, X)[0])
        seq.expansion_certs.append(float(cert))
        cert_prev = cert
    return seq


@dataclass
class CertItem:
    name: str
    k: int
    value: float
    bound: float
    passed: bool

    def to_json(self) -> dict:
        return {"name": self.name, "k": self.k, "value": self.value, "bound": self.bound,
                "pass": self.passed}


@dataclass
class CertReport:
    items: list

    @property
    def passed(self) -> bool:
        return all(i.passed for i in self.items)

    def to_json(self) -> dict:
        return {"pass": self.passed, "items": [i.to_json() for i in self.items]}


def certify(T: LinearMap, seq: ConsistentSeq, *, rtol: float = 1e-9) -> CertReport:
    """Recompute determinants and expansion minima and check the order-k bounds."""
    A = T.matrix
    p = T.p
    items = []
    scale = max(float(np.abs(A).max()) if A.size else 0.0, 1e-300)
    for k in range(1, seq.k + 1):
        X = np.column_stack(seq.xs[:k])
        Th = np.column_stack(seq.thetas[:k])
        det = float(abs(np.linalg.det(Th.T @ A @ X)))
        bound = 2.0 ** -k * math.prod(seq.F_lo[:k])
        items.append(CertItem("det_bound", k, det, bound, det >= bound * (1 - rtol)))
        items.append(CertItem("det_consistency", k, det, seq.dets[k - 1],
                              abs(det - seq.dets[k - 1]) <= 1e-10 * max(det, seq.dets[k - 1], 1e-300)))
        if _exact_inner(p):
            actual, _ = restricted_min_norm(T, X)
        else:
            actual = _sampled_min(T, X)
        cert = seq.expansion_certs[k - 1]
        items.append(CertItem("expansion_cert_valid", k, actual, cert, actual >= cert * (1 - rtol) - 1e-14 * scale))
        eb = 4.0 ** -k * seq.F_lo[k - 1]
        items.append(CertItem("expansion_bound", k, cert, eb, cert >= eb * (1 - rtol)))
        theta, x = seq.thetas[k - 1], seq.xs[k - 1]
        dn = float(np.linalg.norm(theta, ord=T.codomain.q))
        items.append(CertItem("theta_unit", k, dn, 1.0, abs(dn - 1.0) <= 1e-10))
        xn = float(np.linalg.norm(x, ord=p))
        items.append(CertItem("x_unit", k, xn, 1.0, abs(xn - 1.0) <= 1e-10))
        if k > 1:
            van = float(np.abs(theta @ A @ X[:, :k - 1]).max())
            items.append(CertItem("theta_vanishes", k, van, 1e-10 * scale, van <= 1e-10 * scale))
    return CertReport(items)


def _sampled_min(T: LinearMap, X: np.ndarray, n: int = 2000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((X.shape[1], n))
    V = X @ C
    return float(np.min(np.linalg.norm(T.matrix @ V, ord=T.p, axis=0)
                        / np.linalg.norm(V, ord=T.p, axis=0)))
