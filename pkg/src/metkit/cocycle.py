"""Random linear cocycles over finite-alphabet base processes.

Products are kept as ``2**e * M`` with ``M`` renormalised by exact powers of
two, so scaling never introduces rounding.  k-volume growth is tracked through
exterior powers (compound matrices): ``sigma_max(C_k(M)) = sigma_1...sigma_k``
and ``C_k`` is multiplicative, so small singular values never have to be
resolved next to large ones.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

from .normed_space import INF, NormedSpace, p_to_json, parse_p

LN2 = math.log(2.0)
CSV_VERSION = "metkit-spectrum-csv v1"
WORKERS_ENV = "METKIT_WORKERS"


# ---------------------------------------------------------------------------
# base processes and trajectories


@dataclass(frozen=True)
class BaseProcess:
    kind: str                              # bernoulli | markov | fixed
    probs: tuple = (1.0,)
    transition: tuple | None = None
    start: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "markov", "fixed"):
            raise ValueError(f"unknown base kind {self.kind!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.kind == "fixed":
            object.__setattr__(self, "probs", (1.0,))
            return
        if self.kind == "bernoulli":
            pr = np.asarray(self.probs, dtype=float)
            if pr.ndim != 1 or pr.size == 0 or np.any(pr < 0) or abs(pr.sum() - 1) > 1e-12:
                raise ValueError("bernoulli probabilities must be nonnegative and sum to 1")
            object.__setattr__(self, "probs", tuple(map(float, pr)))
            return
        P = np.asarray(self.transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.size == 0:
            raise ValueError("markov transition must be a square array")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-12):
            raise ValueError("markov transition rows must be nonnegative and sum to 1")
        if self.start is not None and not 0 <= self.start < P.shape[0]:
            raise ValueError("markov start state out of range")
        object.__setattr__(self, "transition", tuple(tuple(map(float, r)) for r in P))
        pi = self.stationary()
        object.__setattr__(self, "probs", tuple(map(float, pi)))

    @property
    def alphabet(self) -> int:
        if self.kind == "markov":
            return len(self.transition)
        return len(self.probs)

    def stationary(self) -> np.ndarray:
        if self.kind != "markov":
            return np.asarray(self.probs)
        P = np.asarray(self.transition)
        w, v = np.linalg.eig(P.T)
        ones = np.abs(w - 1.0) < 1e-9
        if ones.sum() != 1:
            raise ValueError("markov chain is not irreducible (stationary law not unique)")
        pi = np.real(v[:, np.argmax(ones)])
        pi = np.abs(pi) / np.abs(pi).sum()
        return pi

    def reversed_transition(self) -> np.ndarray:
        P = np.asarray(self.transition)
        pi = self.stationary()
        return (P.T * pi[None, :]) / pi[:, None]

    def with_seed(self, seed: int) -> "BaseProcess":
        return BaseProcess(self.kind, self.probs, self.transition, self.start, seed)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "seed": int(self.seed)}
        if self.kind == "bernoulli":
            out["probs"] = list(self.probs)
        if self.kind == "markov":
            out["transition"] = [list(r) for r in self.transition]
            if self.start is not None:
                out["start"] = self.start
        return out

    @classmethod
    def from_json(cls, data: dict) -> "BaseProcess":
        kind = data["kind"]
        return cls(kind, tuple(data.get("probs", (1.0,))),
                   data.get("transition"), data.get("start"), int(data.get("seed", 0)))


@dataclass(frozen=True)
class Trajectory:
    """``symbols[j]`` drives step ``j >= 0``; ``past[j]`` drives step ``-1 - j``."""

    symbols: np.ndarray
    past: np.ndarray | None = None
    seed: int | None = None

    @property
    def two_sided(self) -> bool:
        return self.past is not None

    def symbol_at(self, i: int) -> int:
        if i >= 0:
            if i >= len(self.symbols):
                raise IndexError(f"step {i} beyond trajectory length {len(self.symbols)}")
            return int(self.symbols[i])
        if self.past is None:
            raise IndexError("negative step on a one-sided trajectory")
        if -1 - i >= len(self.past):
            raise IndexError(f"step {i} beyond backward extension")
        return int(self.past[-1 - i])

    def window(self, start: int, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be nonnegative")
        if start >= 0:
            if start + n > len(self.symbols):
                raise IndexError("window exceeds trajectory")
            return np.asarray(self.symbols[start:start + n])
        return np.array([self.symbol_at(i) for i in range(start, start + n)], dtype=int)


def _markov_chain(P: np.ndarray, x0: int, n: int, rng) -> np.ndarray:
    cum = np.cumsum(P, axis=1)
    u = rng.random(n)
    out = np.empty(n, dtype=np.int64)
    x = x0
    for i in range(n):
        x = min(int(np.searchsorted(cum[x], u[i], side="right")), P.shape[0] - 1)
        out[i] = x
    return out


def trajectory(base: BaseProcess, n_max: int, *, two_sided: bool = True, seed=None) -> Trajectory:
    """Sample ``n_max`` forward symbols (and as many backward ones when two-sided)."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    seed = base.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    if base.kind == "fixed":
        fwd = np.zeros(n_max, dtype=np.int64)
        return Trajectory(fwd, fwd.copy() if two_sided else None, seed)
    if base.kind == "bernoulli":
        pr = np.asarray(base.probs)
        fwd = rng.choice(len(pr), size=n_max, p=pr)
        past = rng.choice(len(pr), size=n_max, p=pr) if two_sided else None
        return Trajectory(fwd.astype(np.int64), None if past is None else past.astype(np.int64), seed)
    P = np.asarray(base.transition)
    pi = base.stationary()
    x0 = base.start if base.start is not None else int(rng.choice(len(pi), p=pi))
    fwd = np.r_[x0, _markov_chain(P, x0, n_max - 1, rng)].astype(np.int64)
    past = _markov_chain(base.reversed_transition(), x0, n_max, rng) if two_sided else None
    return Trajectory(fwd, past, seed)


def sample_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Per-trajectory seed, independent of scheduling."""
    return np.random.SeedSequence([int(base_seed), int(index)])


# ---------------------------------------------------------------------------
# generators and products


@dataclass(frozen=True)
class Generator:
    matrices: tuple
    space: NormedSpace
    split: int | None = None          # head dimension of a declared head+tail block split

    def __post_init__(self):
        mats = tuple(np.array(m, dtype=float) for m in self.matrices)
        if not mats:
            raise ValueError("generator needs at least one matrix")
        d = self.space.dim
        for m in mats:
            if m.shape != (d, d):
                raise ValueError(f"generator matrix shape {m.shape} != ({d}, {d})")
            if not np.all(np.isfinite(m)):
                raise ValueError("generator matrix has non-finite entries")
            m.flags.writeable = False
        if self.split is not None and not 0 <= self.split <= d:
            raise ValueError("split must lie in [0, dim]")
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def from_arrays(cls, matrices, p: float = 2.0, split: int | None = None) -> "Generator":
        mats = [np.asarray(m, dtype=float) for m in matrices]
        if not mats:
            raise ValueError("generator needs at least one matrix")
        return cls(tuple(mats), NormedSpace(mats[0].shape[0], p), split)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def p(self) -> float:
        return self.space.p

    @property
    def stack(self) -> np.ndarray:
        return np.stack(self.matrices)

    def transpose(self) -> "Generator":
        return Generator(tuple(m.T for m in self.matrices), self.space.dual(),
                         None if self.split is None else self.split)

    def block(self, which: str) -> "Generator":
        """Head or tail sub-generator of the declared split."""
        if self.split is None:
            raise ValueError("generator has no declared block split")
        h = self.split
        for i, m in enumerate(self.matrices):
            if np.any(m[:h, h:]) or np.any(m[h:, :h]):
                raise ValueError(f"matrix {i} does not respect the head/tail split")
        sl = slice(0, h) if which == "head" else slice(h, self.dim)
        mats = tuple(m[sl, sl] for m in self.matrices)
        return Generator(mats, NormedSpace(mats[0].shape[0], self.p)) if mats[0].size else None

    def to_json(self) -> dict:
        out = {"p": p_to_json(self.p), "matrices": [m.tolist() for m in self.matrices]}
        if self.split is not None:
            out["split"] = self.split
        return out

    @classmethod
    def from_json(cls, data: dict) -> "Generator":
        return cls.from_arrays(data["matrices"], parse_p(data.get("p", 2)), data.get("split"))


def _opnorm_inf(M: np.ndarray) -> np.ndarray:
    return np.abs(M).sum(axis=-1).max(axis=-1)


@dataclass(frozen=True)
class ScaledProduct:
    """Represents ``exp(logscale) * matrix``; ``matrix`` has inf-operator norm in [0.5, 2]."""

    matrix: np.ndarray
    exponent: int = 0                 # logscale = exponent * ln 2
    zero: bool = False

    @property
    def logscale(self) -> float:
        return -INF if self.zero else self.exponent * LN2

    def represented(self) -> np.ndarray:
        if self.zero:
            return np.zeros_like(self.matrix)
        return np.ldexp(self.matrix, self.exponent)

    @staticmethod
    def normalise(M: np.ndarray, exponent: int = 0) -> "ScaledProduct":
        nrm = float(_opnorm_inf(M))
        if nrm == 0.0:
            return ScaledProduct(np.zeros_like(M), 0, True)
        if 0.5 <= nrm <= 2.0:
            return ScaledProduct(M, exponent)
        _, e = math.frexp(nrm)
        return ScaledProduct(np.ldexp(M, -e), exponent + e)

    def compose(self, inner: "ScaledProduct") -> "ScaledProduct":
        """``self ∘ inner``."""
        if self.zero or inner.zero:
            return ScaledProduct(np.zeros((self.matrix.shape[0], inner.matrix.shape[1])), 0, True)
        return ScaledProduct.normalise(self.matrix @ inner.matrix, self.exponent + inner.exponent)


def cocycle_product(gen: Generator, traj: Trajectory, start: int, n: int) -> ScaledProduct:
    """``L^{(n)}`` at the point ``sigma^start omega``: ``L_{start+n-1} ... L_{start}``."""
    syms = traj.window(start, n)
    acc = ScaledProduct(np.eye(gen.dim), 0)
    for s in syms:
        M = gen.matrices[int(s)] @ acc.matrix
        acc = ScaledProduct.normalise(M, acc.exponent)
        if acc.zero:
            return acc
    return acc


def dual_cocycle(gen: Generator, traj: Trajectory) -> tuple[Generator, Trajectory]:
    """Adjoint cocycle over the inverse base map.

    The dual generator at ``omega`` is the transpose of the primal one at
    ``sigma^{-1} omega``, so the dual orbit reads the primal past forwards and
    the primal future backwards.  Then ``cocycle_product(dual, -n, n)`` is the
    transpose of ``cocycle_product(gen, 0, n)``.
    """
    if not traj.two_sided:
        raise ValueError("the dual cocycle needs a two-sided trajectory")
    return gen.transpose(), Trajectory(traj.past, traj.symbols, traj.seed)


def dual_base(base: BaseProcess) -> BaseProcess:
    """Law of the inverse base map (time reversal)."""
    if base.kind != "markov":
        return base
    R = base.reversed_transition()
    return BaseProcess("markov", transition=tuple(map(tuple, R)), start=base.start, seed=base.seed)


# ---------------------------------------------------------------------------
# compound matrices


@lru_cache(maxsize=None)
def _k_subsets(d: int, k: int) -> np.ndarray:
    return np.array(list(combinations(range(d), k)), dtype=np.intp)


def compound(M: np.ndarray, k: int) -> np.ndarray:
    """k-th compound (matrix of k x k minors); batched over leading axes."""
    M = np.asarray(M, dtype=float)
    if k == 1:
        return M.copy()
    I = _k_subsets(M.shape[-2], k)
    J = _k_subsets(M.shape[-1], k)
    blocks = M[..., I[:, None, :, None], J[None, :, None, :]]
    return np.linalg.det(blocks)


# ---------------------------------------------------------------------------
# spectrum estimation


def _run_samples(mats: np.ndarray, base: BaseProcess, indices, kmax: int, grid, dual: bool):
    """Per-sample ``(1/n) log D_k`` for ``k <= kmax`` on ``grid``; shape (S, kmax, G)."""
    n_max = int(grid[-1])
    S = len(indices)
    syms = np.empty((S, n_max), dtype=np.intp)
    for s, idx in enumerate(indices):
        t = trajectory(base, n_max, two_sided=dual, seed=sample_seed(base.seed, idx))
        syms[s] = t.past if dual else t.symbols
    comps = [compound(mats, k) for k in range(1, kmax + 1)]
    out = np.empty((S, kmax, len(grid)))
    grid_pos = {int(n): g for g, n in enumerate(grid)}
    for ki, C in enumerate(comps):
        c = C.shape[-1]
        P = np.broadcast_to(np.eye(c), (S, c, c)).copy()
        ex = np.zeros(S, dtype=np.int64)
        dead = np.zeros(S, dtype=bool)
        for j in range(n_max):
            P = C[syms[:, j]] @ P
            nrm = _opnorm_inf(P)
            zero = nrm == 0.0
            dead |= zero
            _, e = np.frexp(np.where(zero, 1.0, nrm))
            P = np.ldexp(P, -e[:, None, None])
            ex += e
            g = grid_pos.get(j + 1)
            if g is not None:
                smax = np.linalg.norm(P, ord=2, axis=(1, 2))
                with np.errstate(divide="ignore"):
                    val = (ex * LN2 + np.log(smax)) / (j + 1)
                out[:, ki, g] = np.where(dead, -INF, val)
    return out


def _regression_weights(x: np.ndarray) -> np.ndarray:
    """Weights ``w`` with ``w @ y`` = intercept of the least-squares line of y on x."""
    X = np.column_stack([np.ones_like(x), x])
    return np.linalg.pinv(X)[0]


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else len(os.sched_getaffinity(0))
    return max(1, int(workers))


@dataclass
class SpectrumReport:
    kmax: int
    n_grid: list
    n_samples: int
    p: float
    values: np.ndarray            # (S, kmax, G) per-sample (1/n) log D_k
    Delta: np.ndarray
    Delta_se: np.ndarray
    mu: np.ndarray
    mu_se: np.ndarray
    dual: bool = False
    fekete_max_excess: float = 0.0
    kappa_upper: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def means(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def monotone_ok(self, factor: float = 2.0) -> bool:
        for i in range(self.kmax - 1):
            a, b = self.mu[i], self.mu[i + 1]
            if not np.isfinite(a) or not np.isfinite(b):
                continue
            se = math.hypot(self.mu_se[i], self.mu_se[i + 1])
            if b > a + factor * se + 1e-12:
                return False
        return True

    def to_json(self) -> dict:
        f = lambda a: [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]
        out = {
            "kmax": self.kmax, "n_grid": list(map(int, self.n_grid)), "n_samples": self.n_samples,
            "p": p_to_json(self.p), "dual": self.dual,
            "Delta": f(self.Delta), "Delta_se": f(self.Delta_se),
            "mu": f(self.mu), "mu_se": f(self.mu_se),
            "mean_curve": [f(row) for row in self.means],
            "fekete_max_excess": float(self.fekete_max_excess),
            "monotone": self.monotone_ok(),
        }
        if self.kappa_upper is not None:
            out["kappa_upper"] = None if not np.isfinite(self.kappa_upper) else float(self.kappa_upper)
        out.update(self.extra)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {CSV_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "n", "sample", "value"])
        S, K, G = self.values.shape
        for k in range(K):
            for g in range(G):
                for s in range(S):
                    w.writerow([k + 1, int(self.n_grid[g]), s, repr(float(self.values[s, k, g]))])
        return buf.getvalue()


def estimate_spectrum(gen: Generator, base: BaseProcess, kmax: int, n_grid, n_samples: int, *,
                      dual: bool = False, workers: int | None = None) -> SpectrumReport:
    """Volume growth rates ``Delta_k`` and exponents ``mu_k`` from sampled orbits.

    Growth is measured with Euclidean volumes; all norms on a finite-dimensional
    space are equivalent, so the limits coincide with the ones for ``gen.p``.
    With ``dual=True`` the adjoint cocycle over the inverse base is used.
    """
    grid = np.asarray(sorted(set(int(n) for n in n_grid)), dtype=np.int64)
    if len(grid) == 0 or grid[0] < 1 or list(grid) != [int(n) for n in n_grid]:
        raise ValueError("n_grid must be strictly increasing positive integers")
    if not 1 <= kmax <= gen.dim:
        raise ValueError(f"kmax must be in [1, {gen.dim}]")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if base.alphabet != len(gen.matrices):
        raise ValueError("alphabet size differs from the number of generator matrices")
    mats = gen.stack
    if dual:
        mats = np.transpose(mats, (0, 2, 1))
    workers = resolve_workers(workers)
    idx = list(range(n_samples))
    if workers == 1 or n_samples < 2 * workers:
        values = _run_samples(mats, base, idx, kmax, grid, dual)
    else:
        chunks = [idx[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_run_samples, [mats] * workers, [base] * workers, chunks,
                                [kmax] * workers, [grid] * workers, [dual] * workers))
        values = np.empty((n_samples, kmax, len(grid)))
        for ch, part in zip(chunks, parts):
            values[ch] = part
    return _summarise(values, grid, kmax, n_samples, gen.p, dual)


def _summarise(values, grid, kmax, n_samples, p, dual) -> SpectrumReport:
    G = len(grid)
    top = np.arange(G // 2, G) if G >= 2 else np.arange(G)
    x = 1.0 / grid[top].astype(float)
    if len(top) >= 2:
        w = _regression_weights(x)
    else:
        w = np.ones(1)
    with np.errstate(invalid="ignore"):
        dk = values[:, :, top] @ w                      # (S, K)
    dk = np.where(np.any(np.isneginf(values[:, :, top]), axis=2), -INF, dk)
    prev = np.concatenate([np.zeros((n_samples, 1)), dk[:, :-1]], axis=1)
    with np.errstate(invalid="ignore"):
        mk = dk - prev
    mk = np.where(np.isneginf(dk), -INF, mk)
    Delta = dk.mean(axis=0)
    mu = mk.mean(axis=0)

    def se(a):
        if n_samples < 2:
            return np.zeros(a.shape[1])
        with np.errstate(invalid="ignore"):
            s = a.std(axis=0, ddof=1) / math.sqrt(n_samples)
        return np.where(np.isfinite(s), s, 0.0)

    Delta_se, mu_se = se(dk), se(mk)
    # floor by the regression residual of the mean curve
    if len(top) >= 3:
        X = np.column_stack([np.ones_like(x), x])
        cov = np.linalg.inv(X.T @ X)[0, 0]
        mean_curve = values[:, :, top].mean(axis=0)
        for k in range(kmax):
            y = mean_curve[k]
            if not np.all(np.isfinite(y)):
                continue
            beta = np.linalg.lstsq(X, y, rcond=None)[0]
            r = y - X @ beta
            s2 = float(r @ r) / (len(top) - 2)
            reg = math.sqrt(s2 * cov)
            Delta_se[k] = max(Delta_se[k], reg)
        reg_mu = [math.hypot(Delta_se[k], Delta_se[k - 1] if k else 0.0) for k in range(kmax)]
        if n_samples < 2:
            mu_se = np.asarray(reg_mu)
    # subadditivity monitor: a_n = n * mean must satisfy a_{n+m} <= a_n + a_m in expectation
    means = values.mean(axis=0) * grid[None, :]
    excess = 0.0
    pos = {int(n): i for i, n in enumerate(grid)}
    for i, n in enumerate(grid):
        for j, m in enumerate(grid[: i + 1]):
            t = pos.get(int(n + m))
            if t is not None:
                with np.errstate(invalid="ignore"):
                    diff = means[:, t] - means[:, i] - means[:, j]
                diff = diff[np.isfinite(diff)]
                e = float(diff.max()) if diff.size else -INF
                if np.isfinite(e):
                    excess = max(excess, float(e))
    return SpectrumReport(kmax, list(map(int, grid)), n_samples, p, values, Delta, Delta_se,
                          mu, mu_se, dual, excess)


def kappa_upper(gen: Generator, base: BaseProcess, n_grid, n_samples: int = 1, *,
                workers: int | None = None) -> float:
    """Top exponent of the declared tail block: an upper bound for the compactness rate."""
    tail = gen.block("tail")
    if tail is None:
        return -INF
    rep = estimate_spectrum(tail, base, 1, n_grid, n_samples, workers=workers)
    return float(rep.Delta[0])


# ---------------------------------------------------------------------------
# temperedness


@dataclass
class TemperednessReport:
    max_ratio: float
    threshold: float
    passed: bool
    window_max: list

    def to_json(self) -> dict:
        return {"max_ratio": self.max_ratio, "threshold": self.threshold,
                "pass": self.passed, "window_max": self.window_max}


def temperedness_diagnostic(series, threshold: float = 0.05, *, tail_fraction: float = 0.5,
                            windows: int = 4) -> TemperednessReport:
    """Largest ``g(n)/n`` over the tail of the series (``series[i]`` is ``g`` at ``n = i + 1``)."""
    g = np.asarray(series, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("series must be a non-empty sequence")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("series must be finite and nonnegative")
    n = np.arange(1, g.size + 1)
    start = min(int(g.size * (1 - tail_fraction)), g.size - 1)
    ratio = g[start:] / n[start:]
    parts = np.array_split(ratio, min(windows, ratio.size))
    wmax = [float(p.max()) for p in parts]
    m = float(ratio.max())
    return TemperednessReport(m, float(threshold), m <= threshold, wmax)


def tempered_bound_series(gen: Generator, traj: Trajectory, v, lam: float, delta: float,
                  n: int, horizon: int) -> np.ndarray:
    """``log+ sup_{1<=q<=horizon} e^{-q(lam+delta)} ||L^{(q)}|_V||`` at ``sigma^j omega``, ``j < n``.

    ``V = span(v)`` must be invariant under every generator matrix.
    """
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v, ord=gen.p)
    factors = []
    for i, M in enumerate(gen.matrices):
        w = M @ v
        c = float(w @ v / (v @ v))
        if np.linalg.norm(w - c * v) > 1e-12 * max(1.0, np.linalg.norm(w)):
            raise ValueError(f"span(v) is not invariant under matrix {i}")
        factors.append(c)
    syms = traj.window(0, n + horizon)
    with np.errstate(divide="ignore"):
        logs = np.log(np.abs(np.asarray(factors)))[syms] - (lam + delta)
    csum = np.r_[0.0, np.cumsum(logs)]
    out = np.empty(n)
    for j in range(n):
        out[j] = np.max(csum[j + 1:j + horizon + 1] - csum[j])
    return np.maximum(out, 0.0)
