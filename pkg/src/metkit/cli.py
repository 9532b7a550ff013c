"""Command-line runner: scenarios, config-driven experiments and the seeded self-check."""
from __future__ import annotations

import argparse
import json
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .cocycle import (
    BaseProcess,
    Generator,
    estimate_spectrum,
    kappa_upper,
    tempered_bound_series,
    resolve_workers,
    temperedness_diagnostic,
    trajectory,
)
from .normed_space import INF, NormedSpace, Subspace, grassmann_distance, parse_p
from .oseledets import (
    filtration,
    group_exponents,
    splitting,
    verify_reduced_cocycle,
)
from .volume import LinearMap, verify_inequalities

REPORT_VERSION = "metkit-report v1"

# allowed keys; a nested dict means a sub-object, None means any value
SCHEMA = {
    "name": None,
    "description": None,
    "space": {"dim": None, "p": None},
    "base": {"kind": None, "probs": None, "transition": None, "start": None, "seed": None},
    "generator": {"matrices": None, "split": None},
    "run": {
        "n_grid": None, "n_samples": None, "kmax": None, "gap_threshold": None,
        "epsilon": None, "filtration_grid": None, "splitting_n": None, "dual": None,
        "reduced": {"level": None, "n": None, "n_slow": None},
        "inequalities": {"kmax": None, "V": None, "mode": None},
        "temperedness": {"v": None, "exponent": None, "delta": None, "n": None,
                         "horizon": None, "threshold": None},
    },
    "oracle": {
        "type": None,
        "mu": {"expected": None, "tol": None, "se_factor": None},
        "dual_mu": {"tol": None, "se_factor": None},
        "slow_spaces": {"tol": None, "levels": None},
        "cauchy": {"margin": None},
        "splitting": {"tol": None, "blocks": None},
        "reduced": {"tol": None},
        "kappa_upper": {"expected": None, "tol": None},
        "exceptional": {"margin": None, "count": None},
        "head": {"se_factor": None},
        "inequalities": None,
        "temperedness": None,
        "levels": None,
    },
    "outputs": {"directory": None, "formats": None},
}
REQUIRED = [("space", "dim"), ("space", "p"), ("base", "kind"), ("generator", "matrices"),
            ("run", "n_grid"), ("run", "kmax")]


class ConfigError(ValueError):
    pass


def _line_of(text: str, key: str, after: int = 0) -> int:
    m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, after)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def _check_keys(obj, schema, path, text, errors):
    if not isinstance(obj, dict):
        errors.append(f"'{path or '<root>'}' must be an object")
        return
    for key, val in obj.items():
        if key not in schema:
            errors.append(f"line {_line_of(text, key)}: unknown key '{key}'"
                          + (f" in '{path}'" if path else ""))
        elif isinstance(schema[key], dict):
            if isinstance(val, bool):
                continue
            _check_keys(val, schema[key], f"{path}.{key}" if path else key, text, errors)


def validate_config(data: dict, text: str = "") -> dict:
    """Reject unknown keys and inconsistent dimensions; returns ``data`` unchanged."""
    errors: list[str] = []
    _check_keys(data, SCHEMA, "", text, errors)
    for sec, key in REQUIRED:
        if key not in data.get(sec, {}):
            errors.append(f"missing required key '{sec}.{key}'")
    if errors:
        raise ConfigError("\n".join(errors))
    try:
        p = parse_p(data["space"]["p"])
        dim = int(data["space"]["dim"])
        mats = [np.asarray(m, dtype=float) for m in data["generator"]["matrices"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"line {_line_of(text, 'space')}: invalid space/generator: {exc}") from exc
    for i, m in enumerate(mats):
        if m.shape != (dim, dim):
            errors.append(f"line {_line_of(text, 'matrices')}: matrix {i} has shape {m.shape}, "
                          f"expected ({dim}, {dim})")
    grid = data["run"]["n_grid"]
    if not grid or any(int(b) <= int(a) for a, b in zip(grid, grid[1:])) or int(grid[0]) < 1:
        errors.append(f"line {_line_of(text, 'n_grid')}: n_grid must be strictly increasing positive integers")
    kmax = data["run"]["kmax"]
    if not 1 <= int(kmax) <= dim:
        errors.append(f"line {_line_of(text, 'kmax')}: kmax must be in [1, {dim}]")
    try:
        base = BaseProcess.from_json(data["base"])
        if base.alphabet != len(mats):
            errors.append(f"line {_line_of(text, 'base')}: base alphabet {base.alphabet} "
                          f"!= {len(mats)} generator matrices")
    except (ValueError, TypeError) as exc:
        errors.append(f"line {_line_of(text, 'base')}: {exc}")
    if p <= 0:
        errors.append("p must be >= 1")
    if errors:
        raise ConfigError("\n".join(errors))
    return data


def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.msg}") from exc
    return validate_config(data, text)


# ---------------------------------------------------------------------------
# scenarios


def _scenario_dir():
    return resources.files("metkit") / "scenarios"


def scenario_names() -> list:
    return sorted(p.name[:-5] for p in _scenario_dir().iterdir() if p.name.endswith(".json"))


def load_scenario(name: str) -> dict:
    f = _scenario_dir() / f"{name}.json"
    if not f.is_file():
        raise ConfigError(f"unknown scenario {name!r}; available: {', '.join(scenario_names())}")
    text = f.read_text()
    return validate_config(json.loads(text), text)


def list_scenarios() -> list:
    out = []
    for name in scenario_names():
        cfg = load_scenario(name)
        oracle = cfg.get("oracle", {})
        out.append({"name": name, "description": cfg.get("description", ""),
                    "oracle_type": oracle.get("type"),
                    "oracle": {k: v for k, v in oracle.items() if k != "type"}})
    return out


# ---------------------------------------------------------------------------
# run


@dataclass
class Check:
    name: str
    passed: bool
    value: object
    target: object
    tol: object

    def to_json(self):
        return {"name": self.name, "pass": bool(self.passed), "value": _clean(self.value),
                "target": _clean(self.target), "tol": _clean(self.tol)}


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.integer):
        return int(x)
    return x


def _subspace(space: NormedSpace, rows) -> Subspace:
    return Subspace(space, np.asarray(rows, dtype=float).T)


def run_experiment(cfg: dict, *, workers: int | None = None) -> tuple[dict, dict]:
    """Execute a validated config; returns ``(report, csv_texts)``."""
    space = NormedSpace(int(cfg["space"]["dim"]), parse_p(cfg["space"]["p"]))
    gen = Generator(tuple(np.asarray(m, dtype=float) for m in cfg["generator"]["matrices"]),
                    space, cfg["generator"].get("split"))
    base = BaseProcess.from_json(cfg["base"])
    run = cfg["run"]
    oracle = cfg.get("oracle", {})
    kmax = int(run["kmax"])
    n_grid = [int(n) for n in run["n_grid"]]
    n_samples = int(run.get("n_samples", 1))
    gap = float(run.get("gap_threshold", 0.05))
    checks: list[Check] = []
    report: dict = {"version": REPORT_VERSION, "name": cfg.get("name"),
                    "config": cfg}
    csvs: dict = {}

    srep = estimate_spectrum(gen, base, kmax, n_grid, n_samples, workers=workers)
    report["spectrum"] = srep.to_json()
    csvs["spectrum.csv"] = srep.to_csv()
    checks.append(Check("mu_monotone", srep.monotone_ok(), list(srep.mu), "non-increasing", "2 se"))
    groups = group_exponents(srep, gap)
    report["groups"] = groups.to_json()

    if run.get("dual"):
        dspec = estimate_spectrum(gen, base, kmax, n_grid, n_samples, dual=True, workers=workers)
        report["dual_spectrum"] = dspec.to_json()
        if "dual_mu" in oracle:
            o = oracle["dual_mu"]
            ok, diffs, tols = True, [], []
            for k in range(kmax):
                d = abs(srep.Delta[k] - dspec.Delta[k])
                t = o.get("tol", 0.0) or 0.0
                if "se_factor" in o:
                    t = max(t, o["se_factor"] * math.hypot(srep.Delta_se[k], dspec.Delta_se[k]))
                ok &= bool(d <= t)
                diffs.append(d)
                tols.append(t)
            checks.append(Check("dual_exponents", ok, diffs, 0.0, tols))

    if "mu" in oracle:
        o = oracle["mu"]
        exp = o["expected"]
        ok, tols = True, []
        for k, e in enumerate(exp[:kmax]):
            t = o.get("tol", 0.0) or 0.0
            if "se_factor" in o:
                t = max(t, o["se_factor"] * srep.mu_se[k])
            ok &= bool(abs(srep.mu[k] - e) <= t)
            tols.append(t)
        checks.append(Check("mu_oracle", ok, list(srep.mu[:len(exp)]), exp, tols))
    if "levels" in oracle:
        checks.append(Check("level_count", groups.r == oracle["levels"], groups.r, oracle["levels"], 0))

    fgrid = [int(n) for n in run.get("filtration_grid", [])]
    needed = max([max(fgrid, default=0) + 2, int(run.get("splitting_n", 0)) + 2, n_grid[-1] + 1])
    red = run.get("reduced")
    if red:
        needed = max(needed, int(red["n"]) + int(red.get("n_slow", 25)) + 2)
    tcfg = run.get("temperedness")
    if tcfg:
        needed = max(needed, int(tcfg["n"]) + int(tcfg["horizon"]) + 1)
    traj = trajectory(base, needed, two_sided=True)

    if fgrid and groups.r >= 2:
        try:
            filt = filtration(gen, traj, fgrid, groups)
            report["filtration"] = filt.to_json()
            csvs["filtration.csv"] = filt.to_csv()
            if "slow_spaces" in oracle:
                o = oracle["slow_spaces"]
                for lvl, rows in sorted(o["levels"].items()):
                    lvl = int(lvl)
                    if lvl - 2 < len(filt.levels):
                        d = grassmann_distance(filt.levels[lvl - 2].limit, _subspace(space, rows))
                        checks.append(Check(f"slow_space_V{lvl}", d <= o["tol"], d, 0.0, o["tol"]))
                    else:
                        checks.append(Check(f"slow_space_V{lvl}", False, "missing level", rows, o["tol"]))
            if "cauchy" in oracle:
                m = oracle["cauchy"]["margin"]
                for lv in filt.levels:
                    bound = -(lv.gap - m)
                    checks.append(Check(f"cauchy_slope_V{lv.level}", bool(lv.slope <= bound),
                                        lv.slope, bound, m))
        except ValueError as exc:
            report["filtration"] = {"error": str(exc)}
            checks.append(Check("filtration", False, str(exc), "computed", None))
    if "filtration.csv" not in csvs:
        from .oseledets import ApproxFiltration
        csvs["filtration.csv"] = ApproxFiltration(groups).to_csv()

    if traj.two_sided and run.get("splitting_n"):
        try:
            sp = splitting(gen, traj, int(run["splitting_n"]), groups,
                           growth_grid=[g for g in n_grid if g <= needed - 1][-4:] or None)
            report["splitting"] = sp.to_json()
            if "splitting" in oracle:
                o = oracle["splitting"]
                blocks = o["blocks"]
                ok = len(blocks) == len(sp.Z) and sp.direct_sum
                dists = []
                for z, rows in zip(sp.Z, blocks):
                    ref = _subspace(space, rows)
                    d = grassmann_distance(z, ref) if z.k == ref.k else 1.0
                    dists.append(d)
                    ok &= bool(d <= o["tol"])
                checks.append(Check("splitting_blocks", ok, dists, 0.0, o["tol"]))
                checks.append(Check("splitting_direct_sum", sp.residual <= max(o["tol"], 1e-6),
                                    sp.residual, 0.0, max(o["tol"], 1e-6)))
        except ValueError as exc:
            report["splitting"] = {"error": str(exc)}
            if "splitting" in oracle:
                checks.append(Check("splitting_blocks", False, str(exc), "computed", None))

    if red:
        rc = verify_reduced_cocycle(gen, traj, int(red["level"]), groups, srep.mu, int(red["n"]),
                                    n_slow=int(red.get("n_slow", 25)),
                                    tol=oracle.get("reduced", {}).get("tol", 2e-2),
                                    epsilon=run.get("epsilon"))
        report["reduced_cocycle"] = rc.to_json()
        if "reduced" in oracle:
            checks.append(Check("reduced_cocycle", rc.passed, rc.restricted_mu, rc.expected_mu, rc.tol))
            checks.append(Check("quotient_growth", rc.quotient_passed, rc.quotient_rates,
                                rc.quotient_bound, None))

    if gen.split is not None:
        kap = kappa_upper(gen, base, n_grid, n_samples, workers=workers)
        report["kappa_upper"] = kap
        if "kappa_upper" in oracle:
            o = oracle["kappa_upper"]
            checks.append(Check("kappa_upper", abs(kap - o["expected"]) <= o["tol"], kap,
                                o["expected"], o["tol"]))
        if "exceptional" in oracle:
            o = oracle["exceptional"]
            cnt = int(np.sum(srep.mu > kap + o["margin"]))
            checks.append(Check("exceptional_count", cnt == o["count"], cnt, o["count"], 0))
        if "head" in oracle:
            head = gen.block("head")
            hspec = estimate_spectrum(head, base, head.dim, n_grid, n_samples, workers=workers)
            report["head_spectrum"] = hspec.to_json()
            f = oracle["head"]["se_factor"]
            diffs = [abs(srep.mu[k] - hspec.mu[k]) for k in range(head.dim)]
            tols = [f * math.hypot(srep.mu_se[k], hspec.mu_se[k]) for k in range(head.dim)]
            checks.append(Check("head_exponents", all(d <= t for d, t in zip(diffs, tols)),
                                diffs, 0.0, tols))

    if tcfg:
        g = tempered_bound_series(gen, traj, tcfg["v"], tcfg["exponent"], tcfg["delta"],
                          int(tcfg["n"]), int(tcfg["horizon"]))
        thr = float(tcfg.get("threshold", 0.05))
        pos = temperedness_diagnostic(g, thr)
        neg = temperedness_diagnostic(np.arange(1, int(tcfg["n"]) + 1, dtype=float), thr)
        report["temperedness"] = {"fixture": pos.to_json(), "negative_control": neg.to_json()}
        if oracle.get("temperedness"):
            checks.append(Check("temperedness_fixture", pos.passed, pos.max_ratio, thr, None))
            checks.append(Check("temperedness_negative_control", not neg.passed, neg.max_ratio,
                                thr, None))

    s2 = run.get("inequalities")
    if s2:
        T = LinearMap(gen.matrices[0], space, space)
        S = LinearMap(gen.matrices[1 % len(gen.matrices)], space, space)
        V = Subspace(space, np.asarray(s2["V"], dtype=float)) if s2.get("V") is not None else None
        rep = verify_inequalities(T, S, V, int(s2.get("kmax", kmax)), s2.get("mode", "optimize"))
        report["inequalities"] = rep.to_json()
        if oracle.get("inequalities"):
            checks.append(Check("inequality_suite", rep.passed, len(rep.failures()),
                                0, "enclosure-consistent"))

    report["checks"] = [c.to_json() for c in checks]
    report["pass"] = all(c.passed for c in checks)
    return _clean(report), csvs


def write_outputs(report: dict, csvs: dict, directory, formats=("json", "csv")) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    if "json" in formats:
        (out / "report.json").write_text(dumps(report))
    if "csv" in formats:
        for name, text in csvs.items():
            (out / name).write_text(text)
    return out


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# selfcheck


def _random_operator(rng, d: int, p: float):
    kind = rng.integers(0, 6)
    A = rng.standard_normal((d, d))
    if kind == 0:                       # rank deficient
        r = int(rng.integers(1, d))
        A = rng.standard_normal((d, r)) @ rng.standard_normal((r, d))
    elif kind == 1:                     # diagonal with spread
        A = np.diag(np.exp(rng.normal(0, 1.0, d)))
    elif kind == 2:                     # sparse integer
        A = rng.integers(-2, 3, (d, d)).astype(float)
    return LinearMap.from_array(A, p)


def _selfcheck_one(args):
    seed, idx, slack = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
    p = (1.0, 2.0, INF)[idx % 3]
    d = int(rng.integers(2, 6))
    kmax = min(3, d)
    T = _random_operator(rng, d, p)
    S = _random_operator(rng, d, p)
    m = int(rng.integers(1, kmax)) if kmax > 1 else 0
    V = Subspace(T.domain, rng.standard_normal((d, d - m))) if m >= 1 else None
    rep = verify_inequalities(T, S, V, kmax, seed=idx, slack=slack)
    return {"index": idx, "p": "inf" if p == INF else p, "dim": d, "kmax": kmax, "codim": m,
            "pass": rep.passed, "n_checks": len(rep.checks),
            "failures": [c.to_json() for c in rep.failures()]}


def selfcheck(seed: int = 0, n_operators: int = 200, *, slack: float = 1.0,
              workers: int | None = None) -> dict:
    """Run the volume-inequality suite on seeded random operators.

    ``slack < 1`` tightens every right-hand side; it exists to show that the
    suite detects violations.
    """
    jobs = [(int(seed), i, slack) for i in range(n_operators)]
    workers = resolve_workers(workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_selfcheck_one, jobs, chunksize=4))
    else:
        results = [_selfcheck_one(j) for j in jobs]
    failures = [dict(f, operator=r["index"]) for r in results for f in r["failures"]]
    return _clean({
        "version": REPORT_VERSION, "seed": int(seed), "n_operators": n_operators,
        "slack": slack,
        "n_checks": sum(r["n_checks"] for r in results),
        "n_failed": len(failures), "pass": not failures,
        "failures": failures[:50],
        "operators": [{k: v for k, v in r.items() if k != "failures"} for r in results],
    })


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config or a bundled scenario")
    r.add_argument("config", nargs="?", help="path to a JSON config")
    r.add_argument("--scenario", help="name of a bundled scenario")
    r.add_argument("--out", help="output directory (overrides outputs.directory)")
    r.add_argument("--workers", type=int, default=None)
    sub.add_parser("list-scenarios", help="list bundled scenarios and their oracles")
    s = sub.add_parser("selfcheck", help="volume-inequality suite on seeded random operators")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--operators", type=int, default=200)
    s.add_argument("--out", help="write the report here instead of stdout")
    s.add_argument("--corrupt", type=float, default=None, metavar="SLACK",
                   help="test hook: multiply every right-hand side by SLACK (< 1 forces failures)")
    s.add_argument("--workers", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-scenarios":
        sys.stdout.write(dumps(list_scenarios()))
        return 0
    if args.command == "selfcheck":
        rep = selfcheck(args.seed, args.operators,
                        slack=1.0 if args.corrupt is None else args.corrupt, workers=args.workers)
        text = dumps(rep)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        print(f"selfcheck: {rep['n_checks']} checks, {rep['n_failed']} failed", file=sys.stderr)
        return 0 if rep["pass"] else 1
    try:
        if args.scenario:
            cfg = load_scenario(args.scenario)
        elif args.config:
            cfg = load_config(args.config)
        else:
            print("error: give a config path or --scenario NAME", file=sys.stderr)
            return 2
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    report, csvs = run_experiment(cfg, workers=args.workers)
    outputs = cfg.get("outputs", {})
    directory = args.out or outputs.get("directory", "out")
    write_outputs(report, csvs, directory, outputs.get("formats", ("json", "csv")))
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}")
    print(f"report written to {directory}")
    return 0 if report["pass"] else 1


if __name__ == "__main__":
    sys.exit(main())
