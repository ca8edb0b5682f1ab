"""Command-line experiments: phase sweep, coupling pipeline, bound check, potential tables.

Each experiment returns ``(report, csv_text)``.  The CSV is a pure function
of the config (seed included) and is byte-identical for any thread count;
the JSON report adds wall-clock time and the package version.

Exit codes: 0 when every assertion holds, 2 when one fails, 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import chains as _chains
from . import concentration as conc
from . import percolation as perc
from . import pipeline as _pipeline
from . import potential as pot
from . import slt as _slt
from .config import EXPERIMENTS, ExperimentConfig
from .errors import BoundInapplicable, EpsilonOutOfRange, NotEnoughSteps, VacantLabError
from .lattice import build_domain
from .rng import stream


def _report(cfg: ExperimentConfig, metrics: dict, assertions: dict, started: float) -> dict:
    return {
        "experiment": cfg.experiment,
        "config": cfg.as_dict(),
        "metrics": metrics,
        "assertions": {k: bool(v) for k, v in assertions.items()},
        "passed": all(assertions.values()),
        "wall_clock_s": round(time.perf_counter() - started, 3),
        "version": __version__,
    }


def _csv(rows: list[dict], fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\r\n", extrasaction="raise")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _finite(x) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


# ---------------------------------------------------------------- phase sweep


def run_phase_sweep(cfg: ExperimentConfig):
    started = time.perf_counter()
    sizes = cfg.sizes or (cfg.N,)
    estimates = [perc.eta_hat(cfg.d, N, cfg.u_grid, cfg.replicas, cfg.seed, cfg.threads) for N in sizes]
    buf = io.StringIO()
    perc.write_eta_csv(estimates, buf)
    crossings = {str(e.N): _finite(perc.half_crossing(e.u_grid, e.eta)) for e in estimates}
    assertions = {"pathwise_monotone": all(e.pathwise_monotone() for e in estimates)}
    if cfg.u_grid[0] == 0:
        assertions["eta_at_zero_is_one"] = all(e.eta[0] == 1.0 for e in estimates)
    if cfg.max_crossing_shift is not None and len(sizes) > 1:
        xs = [crossings[str(N)] for N in sizes]
        assertions["crossing_shift"] = all(a is not None and b is not None and abs(b - a) < cfg.max_crossing_shift
                                           for a, b in zip(xs, xs[1:]))
    metrics = {
        "half_crossing": crossings,
        "eta": {str(e.N): e.eta.tolist() for e in estimates},
        "stderr": {str(e.N): e.stderr.tolist() for e in estimates},
    }
    return _report(cfg, metrics, assertions, started), buf.getvalue()


# ---------------------------------------------------------------- coupling pipeline

PIPELINE_FIELDS = ("replica", "epsilon", "u", "beta", "sandwich", "chainGood", "walkVacant", "riVacantLow",
                   "riVacantHigh", "walkExcursions", "riExcursions", "trajectories", "freshBodies", "seed")


def run_coupling_pipeline(cfg: ExperimentConfig):
    started = time.perf_counter()
    ctx = _pipeline.build_context(cfg.d, cfg.N, cfg.gamma, cfg.chi)
    res = _pipeline.run_pipeline(ctx, cfg.u, cfg.epsilon, cfg.replicas, cfg.seed, cfg.beta, cfg.threads)
    metrics = {
        "cap_delta": ctx.data.cap_delta,
        "cap_B": ctx.Z.capacity,
        "sandwich_frequency": {repr(e): res.frequency(e) for e in res.epsilons},
        "sandwich_stderr": {repr(e): res.stderr(e) for e in res.epsilons},
        "chain_good_frequency": {repr(e): res.chain_good_frequency(e) for e in res.epsilons},
        "mean_fresh_bodies": float(np.mean([o.fresh_bodies for o in res.outcomes])),
        "regime_floor": cfg.regime_floor(),
    }
    assertions = {"monotone_in_epsilon": res.monotone_in_eps()}
    if cfg.sandwich_min is not None:
        eps = cfg.target_epsilon if cfg.target_epsilon is not None else res.epsilons[0]
        assertions["sandwich_frequency_min"] = res.frequency(eps) >= cfg.sandwich_min
    return _report(cfg, metrics, assertions, started), _csv(res.rows(), PIPELINE_FIELDS)


# ---------------------------------------------------------------- bound check

BOUND_FIELDS = ("table", "kernel", "states", "n", "epsilon", "gammaDev", "sigma2", "piStar", "T", "k",
                "bound", "empirical", "low", "high", "replicas")


def lazy_cycle(m: int = 6) -> np.ndarray:
    P = np.zeros((m, m))
    for x in range(m):
        P[x, x] = 0.5
        P[x, (x + 1) % m] += 0.25
        P[x, (x - 1) % m] += 0.25
    return P


def _coupling_rows(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    eps = cfg.epsilon[0]
    cycle = _slt.ChainKernel.from_matrix(lazy_cycle())
    iid = _slt.iid_kernel(cycle.pi)
    T = max(_chains.mixing_time(cycle), 1)
    rows, freqs = [], {}
    for name, k1, k2 in (("iid-self", iid, iid), ("lazy-cycle-vs-iid", cycle, None)):
        freqs[name] = []
        for ni, n in enumerate(cfg.n_grid):
            fails = 0
            for r in range(cfg.replicas):
                seed = int(np.random.SeedSequence([cfg.seed, 30, ni, r]).generate_state(1)[0])
                if k2 is None:
                    res = _slt.couple_iid(k1, n, eps, seed=seed)
                else:
                    res = _slt.couple_chains(k1, k2, n, eps, seed=seed)
                fails += not res.good
            freq = fails / cfg.replicas
            freqs[name].append(freq)
            kern = k1
            Tk = 1 if k2 is not None else T
            try:
                bound = _slt.failure_bound([kern], n, eps, Tk, cfg.c, cfg.C)
            except (NotEnoughSteps, EpsilonOutOfRange, BoundInapplicable):
                bound = None
            rows.append({"table": "coupling", "kernel": name, "states": kern.n_states, "n": n, "epsilon": eps,
                         "gammaDev": None, "sigma2": None, "piStar": kern.pi_star, "T": Tk, "k": None,
                         "bound": bound, "empirical": freq, "low": None, "high": None, "replicas": cfg.replicas})
    return rows, freqs


def _random_chain(rng, m: int) -> np.ndarray:
    return rng.dirichlet(np.ones(m), size=m)


def minimal_n(gamma_dev: float, sigma2: float, pi_star: float, T: float) -> int:
    """Smallest n at which the discrete bound drops below 1."""
    q = pi_star * gamma_dev**2 / (6 * sigma2)
    k = -math.log2(q)
    floor_needed = math.floor(math.log(4) / (gamma_dev**2 / (6 * sigma2))) + 1
    return int(math.ceil((floor_needed + 1) * k * T)) + 1


def _tail_rows(cfg: ExperimentConfig, n_cap: int = 20_000) -> list[dict]:
    rng = stream(cfg.seed, 31)
    rows = []
    for c in range(cfg.chains):
        m = int(rng.integers(2, cfg.max_states + 1))
        P = _random_chain(rng, m)
        kern = _slt.ChainKernel.from_matrix(P)
        pi = kern.pi
        v = rng.uniform(-1.0, 1.0, m)
        v -= pi @ v
        f = conc.center(v / np.abs(v).max(), pi)
        sigma2 = float(pi @ f**2)
        T = max(_chains.mixing_time(kern), 1)
        top = min(sigma2, 0.5)
        for gi, gamma_dev in enumerate((top, top / 2)):
            n = minimal_n(gamma_dev, sigma2, kern.pi_star, T)
            if n > n_cap:
                continue
            b = conc.chernov_discrete(n, gamma_dev, sigma2, kern.pi_star, T)
            est = conc.empirical_tail(P, f, n, gamma_dev, cfg.tail_replicas, rng=stream(cfg.seed, 32, c, gi), pi=pi)
            rows.append({"table": "tail", "kernel": f"random-{c}", "states": m, "n": n, "epsilon": None,
                         "gammaDev": gamma_dev, "sigma2": sigma2, "piStar": kern.pi_star, "T": T, "k": b.k,
                         "bound": b.value, "empirical": est.frequency, "low": est.low, "high": est.high,
                         "replicas": cfg.tail_replicas})
    return rows


def run_bound_check(cfg: ExperimentConfig):
    started = time.perf_counter()
    coupling, freqs = _coupling_rows(cfg)
    tails = _tail_rows(cfg)
    valid = [r for r in tails if r["bound"] < 1]
    # smallest C for which every applicable coupling bound dominates its frequency
    ratios = [r["empirical"] / (r["bound"] / cfg.C) for r in coupling if r["bound"]]
    metrics = {
        "coupling_failure": freqs,
        "tail_points": len(tails),
        "tail_points_nontrivial": len(valid),
        "max_tail_frequency": max((r["empirical"] for r in tails), default=0.0),
        "calibration_C_required": max(ratios, default=0.0),
    }
    lazy = freqs["lazy-cycle-vs-iid"]
    assertions = {
        "iid_self_never_fails": all(f == 0 for f in freqs["iid-self"]),
        "lazy_cycle_failure_nonincreasing": all(b <= a for a, b in zip(lazy, lazy[1:])),
        "tails_below_bound": all(r["empirical"] <= r["bound"] for r in valid),
    }
    return _report(cfg, metrics, assertions, started), _csv(coupling + tails, BOUND_FIELDS)


# ---------------------------------------------------------------- potential table


def run_tabulate_potential(cfg: ExperimentConfig):
    started = time.perf_counter()
    domain = build_domain(cfg.d, cfg.N, cfg.gamma, cfg.chi)
    buf = io.StringIO()
    rows = pot.tabulate(domain, buf)
    metrics = {r["quantity"]: float(r["value"]) for r in rows}
    return _report(cfg, metrics, {}, started), buf.getvalue()


RUNNERS = {
    "phase-sweep": run_phase_sweep,
    "coupling-pipeline": run_coupling_pipeline,
    "bound-check": run_bound_check,
    "tabulate-potential": run_tabulate_potential,
}


def run(cfg: ExperimentConfig):
    return RUNNERS[cfg.experiment](cfg)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vacantlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--replicas", type=int)
        p.add_argument("--out", type=Path, help="CSV path; the JSON report goes next to it")
        p.add_argument("--threads", type=int)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, validate=False) if args.config else ExperimentConfig()
    changes = {"experiment": args.command}
    for key in ("seed", "replicas", "threads"):
        if getattr(args, key) is not None:
            changes[key] = getattr(args, key)
    if args.out is not None:
        changes["out"] = str(args.out)
    return cfg.replace(**changes).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        report, table = run(cfg)
        if cfg.out:
            out = Path(cfg.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_bytes(table.encode("utf-8"))
            out.with_suffix(".json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                                                encoding="utf-8")
        else:
            sys.stdout.write(table)
    except (VacantLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    failed = [k for k, ok in report["assertions"].items() if not ok]
    for k in failed:
        print(f"assertion failed: {k}", file=sys.stderr)
    return 2 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
