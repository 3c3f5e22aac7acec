"""Command-line entry points: fit, run, report, validate.

Exit status: 0 success, 2 invalid input, 3 optimization failure, 4 resource
limit, 5 failed acceptance check, 6 too few regenerations or states, 1 other.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import oracle
from .consensus import co_occurrence_rs, map_allocation
from .diagnostics import PartitionScheme
from .errors import InvalidInputError, PartmcError, ResourceLimitError
from .ioutil import atomic_write, read_data_csv, read_hyper, write_hyper
from .model import fit_empirical_bayes, moment_start
from .partitions import Allocation, bell
from .regen import find_tours
from .report import (
    DEFAULT_CHECK_EVERY,
    DEFAULT_K_LIST,
    diagnostic_series,
    final_p_values,
    write_series_csv,
    write_series_jsonl,
)
from .samplers import KERNELS, ChainConfig, PosteriorContext, initial_allocation, run_chain
from .trace import Trace

log = logging.getLogger("partmc")

EXIT_ACCEPTANCE = 5
FIXTURES = ("two-island",)


# --- manifest ---------------------------------------------------------------

@dataclass
class ChainSpec:
    kernel: str = "gibbs"
    seed: int = 0
    n_iterations: int = 1000
    gibbs_per_sm: int = 5
    restricted_scans: int = 5
    init: str = "one-cluster"


@dataclass
class RunManifest:
    data: Path | None = None
    fixture: str | None = None
    epsilon: float = 0.01
    hyper_source: str = "fit"  # or "file"
    hyper_path: Path | None = None
    chains: list[ChainSpec] = field(default_factory=list)
    k_list: tuple[int, ...] = DEFAULT_K_LIST
    delta: str | None = None  # None: most frequently visited state
    scheme: str = "visited"  # or "exact"
    check_every: int = DEFAULT_CHECK_EVERY
    rho_min: float = 0.05
    out_dir: Path = Path("partmc-out")

    def validate(self) -> None:
        if (self.data is None) == (self.fixture is None):
            raise InvalidInputError("manifest needs exactly one of a data path or a fixture")
        if self.data is not None and not self.data.exists():
            raise InvalidInputError(f"data file not found: {self.data}")
        if self.fixture is not None and self.fixture not in FIXTURES:
            raise InvalidInputError(f"unknown fixture {self.fixture!r}; choose from {FIXTURES}")
        if self.hyper_source not in ("fit", "file"):
            raise InvalidInputError("hyperparameter source must be 'fit' or 'file'")
        if self.data is not None and self.hyper_source == "file":
            if self.hyper_path is None or not self.hyper_path.exists():
                raise InvalidInputError(f"hyperparameter file not found: {self.hyper_path}")
        if not self.k_list or min(self.k_list) < 2:
            raise InvalidInputError("K list must be non-empty with every K >= 2")
        if self.scheme not in ("visited", "exact"):
            raise InvalidInputError("scheme must be 'visited' or 'exact'")
        if not self.chains:
            raise InvalidInputError("manifest lists no chains")
        for c in self.chains:
            if c.kernel not in KERNELS:
                raise InvalidInputError(f"unknown kernel {c.kernel!r}")

    @classmethod
    def from_json(cls, path) -> "RunManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise InvalidInputError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        base = path.parent

        def rel(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        hyper = raw.get("hyper", {"source": "fit"})
        diag = raw.get("diagnostics", {})
        try:
            chains = [ChainSpec(**c) for c in raw.get("chains", [])]
        except TypeError as exc:
            raise InvalidInputError(f"{path}: bad chain entry ({exc})") from None
        m = cls(
            data=rel(raw.get("data")),
            fixture=raw.get("fixture"),
            epsilon=float(raw.get("epsilon", 0.01)),
            hyper_source=hyper.get("source", "fit"),
            hyper_path=rel(hyper.get("path")),
            chains=chains,
            k_list=tuple(diag.get("k_list", DEFAULT_K_LIST)),
            delta=diag.get("delta"),
            scheme=diag.get("scheme", "visited"),
            check_every=int(diag.get("check_every", DEFAULT_CHECK_EVERY)),
            rho_min=float(raw.get("rho_min", 0.05)),
            out_dir=rel(raw.get("out_dir", "partmc-out")),
        )
        m.validate()
        return m


# --- helpers ----------------------------------------------------------------

def _parse_k_list(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks:
        raise argparse.ArgumentTypeError("K list must be non-empty")
    return ks


def _write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_consensus_outputs(trace: Trace, out: Path, rho_min: float, ids=None) -> dict:
    """Consensus matrix, its standard errors, thresholded pairs and the MAP allocation."""
    summary = {}
    alloc, lp = map_allocation(trace)
    atomic_write(out / "map.txt", f"allocation = {alloc.key!r}\nlog_post = {lp!r}\n")
    summary["map"] = alloc.key
    tours = find_tours(trace)
    rho, se = co_occurrence_rs(trace, tours, ids)
    rho.to_csv(out / "consensus.csv")
    atomic_write(out / "consensus_se.csv", "\n".join(
        [",".join(["id", *rho.ids])] + [",".join([i, *(repr(float(v)) for v in row)]) for i, row in zip(rho.ids, se)]
    ) + "\n")
    atomic_write(out / "pairs.csv", "\n".join(
        ["id_i,id_j,rho"] + [f"{a},{b},{v!r}" for a, b, v in rho.pairs(rho_min)]
    ) + "\n")
    tours.to_csv(out / "tours.csv")
    summary["R"] = tours.R
    return summary


def _fixture_for(kernel: str, epsilon: float) -> oracle.ChainFixture:
    """Data-free stand-ins: Gibbs draws independently from the target, split-merge is trapped.

    The independence chain is the best case for the diagnostic. Even so, sets
    of mass around 1e-4 (the tail of the top-10 states) need a few hundred
    thousand steps before the chi-square reference is accurate.
    """
    trapped = oracle.adversarial_two_island_fixture(epsilon)
    if kernel == "gibbs":
        P = np.outer(np.ones(len(trapped.pi)), trapped.pi)
        return oracle.ChainFixture(trapped.states, P, trapped.pi, {"independent": True})
    return trapped


def _exact_schemes(table: oracle.MassTable, k_list) -> dict[int, PartitionScheme]:
    return {K: oracle.exact_top_k_scheme(table, K) for K in k_list if K < len(table.keys)}


# --- commands ---------------------------------------------------------------

def cmd_fit(args) -> int:
    data = read_data_csv(args.data)
    init = read_hyper(args.init_hyper) if args.init_hyper else moment_start(data)
    fit = fit_empirical_bayes(data, init, n_starts=args.starts, seed=args.seed)
    write_hyper(args.out, fit.hyper, fit.se)
    print(fit.summary())
    for rec in fit.starts:
        print(f"  start {rec['start']}: objective {rec['objective']:.6f}, |grad| {rec['grad_norm']:.2e}, "
              f"{rec['iterations']} iterations")
    return 0


def _run_one(i: int, spec: ChainSpec, m: RunManifest, data, hyper) -> dict:
    out = m.out_dir / f"chain{i:02d}_{spec.kernel}_s{spec.seed}"
    record = {"chain": i, "kernel": spec.kernel, "seed": spec.seed, "dir": str(out)}
    try:
        schemes = None
        if m.fixture is not None:
            fx = _fixture_for(spec.kernel, m.epsilon)
            n_rec = spec.n_iterations * ((1 + spec.gibbs_per_sm) if spec.kernel == "split_merge_hybrid" else 1)
            trace = oracle.simulate_fixture_chain(fx, n_rec, oracle.MINOR_ISLAND[0], spec.seed)
            trace.meta.update({"kernel": spec.kernel, "mode": "fixture"})
            schemes = _exact_schemes(oracle.fixture_table(fx), m.k_list)
            ids = None
        else:
            ctx = PosteriorContext(data, hyper)
            init = initial_allocation(data.n_obs, spec.init, spec.seed)
            cfg = ChainConfig(kernel=spec.kernel, n_iterations=spec.n_iterations, seed=spec.seed,
                              gibbs_cycles_per_splitmerge=spec.gibbs_per_sm,
                              restricted_scan_count=spec.restricted_scans, initial_allocation=init)
            trace = run_chain(data, hyper, cfg, ctx=ctx)
            ids = data.ids
            if m.scheme == "exact":
                schemes = _exact_schemes(oracle.exact_posterior_table(data, hyper), m.k_list)
        trace.save(out / "trace.csv")
        n_obs = len(trace.keys[0])
        rows = diagnostic_series(trace, m.k_list, m.check_every, schemes, m.delta, n_obs)
        write_series_csv(rows, out / "diagnostics.csv")
        write_series_jsonl(rows, out / "diagnostics.jsonl")
        record.update(write_consensus_outputs(trace, out, m.rho_min, ids))
        record["final_p_values"] = {str(k): v for k, v in final_p_values(rows).items()}
        record["status"] = "ok"
        record["exit_code"] = 0
    except PartmcError as exc:
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}", exit_code=exc.exit_code)
    except Exception as exc:  # isolate unexpected failures to this chain
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}", exit_code=1)
    return record


def execute_manifest(m: RunManifest, threads: int = 1, seed: int = 0) -> int:
    m.validate()
    m.out_dir.mkdir(parents=True, exist_ok=True)
    data = hyper = None
    if m.data is not None:
        data = read_data_csv(m.data)
        if m.hyper_source == "file":
            hyper = read_hyper(m.hyper_path)
        else:
            fit = fit_empirical_bayes(data, moment_start(data), seed=seed)
            hyper = fit.hyper
            write_hyper(m.out_dir / "hyper.txt", fit.hyper, fit.se)
            print(fit.summary())
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_run_one, i, spec, m, data, hyper) for i, spec in enumerate(m.chains)]
        records = [f.result() for f in futures]
    _write_json(m.out_dir / "summary.json", {"chains": records})
    for r in records:
        line = f"chain {r['chain']} ({r['kernel']}, seed {r['seed']}): {r['status']}"
        if r["status"] == "ok":
            pv = ", ".join(f"K={k}: {v:.3g}" for k, v in r["final_p_values"].items())
            line += f"; final p-values {pv}"
        else:
            line += f"; {r['error']}"
        print(line)
    failed = [r for r in records if r["status"] != "ok"]
    return failed[0]["exit_code"] if failed else 0


def _manifest_from_args(args) -> RunManifest:
    if args.manifest:
        m = RunManifest.from_json(args.manifest)
        if args.out_dir:
            m.out_dir = Path(args.out_dir)
        return m
    kernels = args.kernel or ["gibbs"]
    chains = [ChainSpec(kernel=k, seed=args.seed + c, n_iterations=args.iters, gibbs_per_sm=args.gibbs_per_sm,
                        restricted_scans=args.restricted_scans, init=args.init)
              for k in kernels for c in range(args.chains)]
    m = RunManifest(
        data=Path(args.data) if args.data else None,
        fixture=args.fixture,
        epsilon=args.epsilon,
        hyper_source="file" if args.hyper else "fit",
        hyper_path=Path(args.hyper) if args.hyper else None,
        chains=chains,
        k_list=args.k_list,
        scheme=args.scheme,
        check_every=args.check_every,
        rho_min=args.rho_min,
        out_dir=Path(args.out_dir or "partmc-out"),
    )
    m.validate()
    return m


def cmd_run(args) -> int:
    return execute_manifest(_manifest_from_args(args), threads=args.threads, seed=args.seed)


def cmd_report(args) -> int:
    out_root = Path(args.out_dir or ".")
    for path in args.traces:
        trace = Trace.load(path)
        out = out_root / Path(path).stem if len(args.traces) > 1 else out_root
        n_obs = len(trace.keys[0])
        rows = diagnostic_series(trace, args.k_list, args.check_every, None, None, n_obs)
        write_series_csv(rows, out / "diagnostics.csv")
        write_series_jsonl(rows, out / "diagnostics.jsonl")
        write_consensus_outputs(trace, out, args.rho_min)
        pv = ", ".join(f"K={k}: {v:.3g}" for k, v in final_p_values(rows).items())
        print(f"{path}: {len(trace)} states, {len(rows)} diagnostic rows; final p-values {pv}")
    return 0


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool

    def __post_init__(self):
        self.value, self.passed = float(self.value), bool(self.passed)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.4g} (threshold {self.threshold:g})"


def calibration_k(prob: np.ndarray, k_max: int, floor: float = 0.01) -> int:
    """Largest K <= k_max whose top-K states each hold ``floor`` of the mass, leaving ``floor`` outside.

    States too light to be visited in a calibration run would be reported as
    unvisited sets, and sets covering all the mass make the covariance singular.
    """
    p = np.sort(prob)[::-1]
    K = min(k_max, int(np.sum(p >= floor)))
    while K >= 2 and 1.0 - p[:K].sum() < floor:
        K -= 1
    return K


def validate_against_oracle(n: int, seed: int = 0, sweeps: int = 1_000_000, calibration_chains: int = 500,
                            calibration_sweeps: int = 20_000, threads: int = 1) -> list[Check]:
    """Synthetic data, exact enumeration, long Gibbs chain and a p-value calibration run."""
    if n > oracle.ORACLE_CAP:
        raise ResourceLimitError(f"validation enumerates all {bell(n):,} allocations; n must be <= {oracle.ORACLE_CAP}")
    if n < 1:
        raise InvalidInputError("n must be positive")
    hyper = oracle.BENCH_HYPER
    data = oracle.benchmark_dataset(n, seed=seed)
    table = oracle.exact_posterior_table(data, hyper)
    prob = dict(zip(table.keys, table.probabilities()))
    ctx = PosteriorContext(data, hyper)
    trace = run_chain(data, hyper, ChainConfig("gibbs", sweeps, seed), ctx=ctx)
    freq = trace.visit_counts() / len(trace)
    emp = dict(zip(trace.keys, freq))
    tv = 0.5 * sum(abs(emp.get(k, 0.0) - p) for k, p in prob.items())
    checks = [Check("total variation vs exact posterior", tv, 0.01, tv < 0.01)]
    if n > 1:
        rho, _ = co_occurrence_rs(trace, find_tours(trace), data.ids)
        err = float(np.abs(rho.rho - oracle.exact_consensus(table).rho).max())
        checks.append(Check("consensus max abs error", err, 0.02, err < 0.02))
    K = calibration_k(table.probabilities(), 3)
    if K < 2:
        checks.append(Check("p-value calibration skipped: fewer than two states carry 1% of the mass "
                            "with 1% left over", 0.0, 0.08, True))
    else:
        from .diagnostics import hotelling_rs

        scheme = oracle.exact_top_k_scheme(table, K)
        starts = table.sample(calibration_chains, np.random.default_rng(seed))

        def one(c):
            init = Allocation.from_key(table.keys[starts[c]])
            cfg = ChainConfig("gibbs", calibration_sweeps, seed + 1 + c, initial_allocation=init)
            tr = run_chain(data, hyper, cfg, ctx=PosteriorContext(data, hyper))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return hotelling_rs(tr, find_tours(tr), scheme).p_value

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            pvals = list(pool.map(one, range(calibration_chains)))
        ks = float(stats.kstest(pvals, "uniform").statistic)
        checks.append(Check(f"p-value calibration KS distance (K={K}, {calibration_chains} chains)", ks, 0.08, ks < 0.08))
    return checks


def cmd_validate(args) -> int:
    checks = validate_against_oracle(args.n, args.seed, args.sweeps, args.calibration_chains,
                                     args.calibration_sweeps, args.threads)
    for c in checks:
        print(c.line())
    if args.out_dir:
        _write_json(Path(args.out_dir) / "validate.json", [c.__dict__ for c in checks])
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print("failed checks: " + "; ".join(failed), file=sys.stderr)
        return EXIT_ACCEPTANCE
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="base random seed")
    shared.add_argument("--out-dir", help="output directory")
    shared.add_argument("--threads", type=int, default=1, help="chains run concurrently")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="partmc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[shared], help="empirical Bayes hyperparameter fit")
    f.add_argument("data", help="data CSV (id column, then one column per variable)")
    f.add_argument("--out", required=True, help="hyperparameter file to write")
    f.add_argument("--init-hyper", help="starting values (hyperparameter file)")
    f.add_argument("--starts", type=int, default=5, help="optimizer starts")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("run", parents=[shared], help="run chains and write traces, diagnostics, consensus")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="JSON run manifest")
    src.add_argument("--data", help="data CSV")
    src.add_argument("--fixture", choices=FIXTURES, help="data-free fixture chain instead of data")
    r.add_argument("--hyper", help="hyperparameter file (default: fit by empirical Bayes)")
    r.add_argument("--kernel", action="append", choices=KERNELS, help="repeat for several kernels")
    r.add_argument("--chains", type=int, default=1, help="chains per kernel, seeds seed, seed+1, ...")
    r.add_argument("--iters", type=int, default=1000)
    r.add_argument("--gibbs-per-sm", type=int, default=5)
    r.add_argument("--restricted-scans", type=int, default=5)
    r.add_argument("--init", default="one-cluster", choices=("one-cluster", "singletons", "random"))
    r.add_argument("--check-every", type=int, default=DEFAULT_CHECK_EVERY)
    r.add_argument("--k-list", type=_parse_k_list, default=DEFAULT_K_LIST)
    r.add_argument("--scheme", default="visited", choices=("visited", "exact"),
                   help="top-K states among visited ones, or from exact enumeration (small N)")
    r.add_argument("--rho-min", type=float, default=0.05)
    r.add_argument("--epsilon", type=float, default=0.01, help="minor-island mass for --fixture")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", parents=[shared], help="diagnostics and consensus from saved traces")
    rep.add_argument("traces", nargs="+")
    rep.add_argument("--check-every", type=int, default=DEFAULT_CHECK_EVERY)
    rep.add_argument("--k-list", type=_parse_k_list, default=DEFAULT_K_LIST)
    rep.add_argument("--rho-min", type=float, default=0.05)
    rep.set_defaults(func=cmd_report)

    v = sub.add_parser("validate", parents=[shared], help="cross-check samplers against exact enumeration")
    v.add_argument("--n", type=int, default=8, help="number of observations")
    v.add_argument("--sweeps", type=int, default=1_000_000)
    v.add_argument("--calibration-chains", type=int, default=500)
    v.add_argument("--calibration-sweeps", type=int, default=20_000)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InvalidInputError.exit_code
    except PartmcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        trace = getattr(exc, "trace", None)
        if trace:
            for rec in trace:
                print(f"  start {rec['start']}: objective {rec['objective']:.6f}, |grad| {rec['grad_norm']:.2e}",
                      file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
