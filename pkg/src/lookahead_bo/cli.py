"""Command-line harness: run BO experiments and the fantasy timing benchmark.

Configuration comes from a YAML file with nested sections, and every key has
a mirroring flag.  Flags override the file; unknown keys are rejected.

    lookahead-bo --function shekel5 --policy 2-step --repeats 10 --out results
    lookahead-bo --fantasy-bench --out results
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import yaml

from .benchmarks import FUNCTIONS, gap_value, get_function, load_optima, run_experiment
from .fantasy import fantasize
from .gp import DTYPE, Dataset, GpModel, KernelHyperparams, root_decompose
from .optimize import parse_policy

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["function", "policy", "repeat", "iteration", "best_y", "gap", "wall_time_s"]
BENCH_COLUMNS = ["n", "m", "fast_s", "naive_s", "speedup"]


class ConfigError(ValueError):
    """Invalid configuration; the CLI exits with status 1."""


@dataclass
class RunConfig:
    functions: list[str] = field(default_factory=list)
    policies: list[str] = field(default_factory=lambda: ["ei"])
    repeats: int = 1
    iterations: int | None = None
    n_init: int | None = None
    seed: int = 0
    fantasy_counts: list[int] | None = None
    out: str = "results"
    wall_time: bool = True
    threads: int = 1
    fantasy_bench: bool = False
    bench_sizes: list[int] = field(default_factory=lambda: [128, 256, 512, 1024])
    bench_counts: list[int] = field(default_factory=lambda: [1, 16, 128])
    bench_reps: int = 5


# YAML layout: section -> {yaml key: RunConfig field}
SECTIONS = {
    "experiment": {
        "functions": "functions",
        "policies": "policies",
        "repeats": "repeats",
        "iterations": "iterations",
        "initial_points": "n_init",
        "seed": "seed",
        "fantasy_counts": "fantasy_counts",
    },
    "output": {"dir": "out", "wall_time": "wall_time"},
    "runtime": {"threads": "threads"},
    "fantasy_bench": {
        "enabled": "fantasy_bench",
        "sizes": "bench_sizes",
        "counts": "bench_counts",
        "reps": "bench_reps",
    },
}


def _split_list(text, cast=str):
    if isinstance(text, (list, tuple)):
        return [cast(v) for v in text]
    return [cast(v.strip()) for v in str(text).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lookahead-bo", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--function", dest="functions", help="comma-separated function names")
    p.add_argument("--policy", dest="policies", help="ei | k-step | k-path | k-eno | binoculars-q (comma-separated)")
    p.add_argument("--repeats", type=int)
    p.add_argument("--iters", dest="iterations", type=int, help="iterations per repeat (default 20 d)")
    p.add_argument("--n-init", dest="n_init", type=int, help="initial design size (default 2 d)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--fantasy-counts", dest="fantasy_counts", help="comma-separated m_1,...,m_{k-1}")
    p.add_argument("--out", help="output directory")
    p.add_argument("--wall-time", dest="wall_time", action=argparse.BooleanOptionalAction, default=None,
                   help="record per-iteration wall time (disable for byte-identical reruns)")
    p.add_argument("--threads", type=int, help="worker processes for repeats")
    p.add_argument("--fantasy-bench", dest="fantasy_bench", action="store_true", default=None)
    p.add_argument("--bench-sizes", dest="bench_sizes")
    p.add_argument("--bench-counts", dest="bench_counts")
    p.add_argument("--bench-reps", dest="bench_reps", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _from_yaml(text: str) -> dict:
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of sections")
    values = {}
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, value in body.items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[SECTIONS[section][key]] = value
    return values


def _normalize(values: dict) -> dict:
    out = dict(values)
    try:
        for key in ("functions", "policies"):
            if key in out and out[key] is not None:
                out[key] = _split_list(out[key])
        for key in ("fantasy_counts", "bench_sizes", "bench_counts"):
            if key in out and out[key] is not None:
                out[key] = _split_list(out[key], int)
        for key in ("repeats", "iterations", "n_init", "seed", "threads", "bench_reps"):
            if key in out and out[key] is not None:
                out[key] = int(out[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in config: {exc}") from exc
    return out


def validate(cfg: RunConfig) -> RunConfig:
    if not cfg.fantasy_bench:
        if not cfg.functions:
            raise ConfigError("missing required key experiment.functions (--function)")
        for name in cfg.functions:
            if name not in FUNCTIONS:
                raise ConfigError(f"unknown function {name!r}; choose from {sorted(FUNCTIONS)}")
        if not cfg.policies:
            raise ConfigError("missing required key experiment.policies (--policy)")
        for spec in cfg.policies:
            try:
                parse_policy(spec, cfg.fantasy_counts)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if cfg.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if cfg.iterations is not None and cfg.iterations < 0:
            raise ConfigError("iterations must be non-negative")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    if any(n < 1 or n > 2048 for n in cfg.bench_sizes):
        raise ConfigError("benchmark sizes must lie in [1, 2048]")
    if any(m < 1 for m in cfg.bench_counts) or cfg.bench_reps < 1:
        raise ConfigError("benchmark counts and reps must be positive")
    return cfg


def parse_config(argv=None, text: str | None = None) -> RunConfig:
    """Build a ``RunConfig`` from an optional YAML file (or text) and flags."""
    args = build_parser().parse_args([] if argv is None else argv)
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if text is not None:
        values.update(_from_yaml(text))
    names = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        if key in names and value is not None:
            values[key] = value
    return validate(RunConfig(**_normalize(values)))


def emit_config(cfg: RunConfig) -> str:
    """YAML text that parses back to ``cfg``."""
    flat = asdict(cfg)
    doc = {section: {k: flat[f] for k, f in keys.items()} for section, keys in SECTIONS.items()}
    return yaml.safe_dump(doc, sort_keys=False)


# --- output ----------------------------------------------------------------------


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def _fmt(v: float) -> str:
    return repr(float(v))


def trace_csv(traces, wall_time: bool = True) -> str:
    """Trace table; ``wall_time=False`` leaves the timing column empty."""
    traces = [t for t in traces if t.error is None]
    max_d = max((get_function(t.function).dim for t in traces), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS + [f"x{i}" for i in range(max_d)])
    optima = load_optima()
    repeat_of = {}
    for t in traces:
        key = (t.function, t.policy)
        repeat_of[key] = repeat_of.get(key, -1) + 1
        y0, y_star = t.initial_best, optima[t.function].value
        for rec in t.records():
            g = gap_value(rec["best_y"], y0, y_star)
            x = [_fmt(v) for v in rec["x"]] + [""] * (max_d - len(rec["x"]))
            wt = _fmt(rec["wall_time_s"]) if wall_time else ""
            w.writerow([t.function, t.policy, repeat_of[key], rec["iteration"], _fmt(rec["best_y"]), _fmt(g), wt] + x)
    return buf.getvalue()


def aggregates_jsonl(aggregates) -> str:
    return "".join(json.dumps(a.to_dict()) + "\n" for a in aggregates)


def emit_results(aggregates, traces, path: str, wall_time: bool = True) -> tuple[str, str]:
    """Write ``traces.csv`` and ``aggregates.jsonl`` under ``path``, replacing old files."""
    csv_path = os.path.join(path, "traces.csv")
    jsonl_path = os.path.join(path, "aggregates.jsonl")
    _atomic_write(csv_path, trace_csv(traces, wall_time))
    _atomic_write(jsonl_path, aggregates_jsonl(aggregates))
    return csv_path, jsonl_path


# --- fantasy timing benchmark ----------------------------------------------------


def _median_time(fn, reps: int) -> float:
    fn()  # warm-up, not counted
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _bench_model(n: int, d: int, seed: int) -> GpModel:
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    y = np.sin(3 * X).sum(1) + 0.1 * rng.standard_normal(n)
    hp = KernelHyperparams(np.full(d, 0.5), 1.0, 1e-2)
    return GpModel.from_data(Dataset(X, y), hp)


def naive_conditioned_posterior(model: GpModel, x_new, y_new, query, chunk: int = 16):
    """Posterior at ``query`` after conditioning from scratch on each fantasy.

    Every one of the ``m`` fantasies gets its own decomposition of the
    ``(n + 1)``-point kernel matrix; copies are processed in chunks of
    ``chunk`` to bound memory.
    """
    hp = model.hyperparams
    X = torch.cat([model._train_x, x_new], 0)
    n1 = X.shape[0]
    K = model.kernel(X, X) + hp.noise_variance * torch.eye(n1, dtype=DTYPE)
    kq = model.kernel(X, query)
    base_y = torch.as_tensor(model.dataset.outcomes, dtype=DTYPE)
    means = []
    for start in range(0, y_new.shape[0], chunk):
        ys = y_new[start : start + chunk]
        c = ys.shape[0]
        L = root_decompose(K.expand(c, n1, n1).clone())
        Y = torch.cat([base_y.expand(c, -1), ys], dim=1)[..., None] - hp.mean_constant
        A = torch.linalg.solve_triangular(L, kq.expand(c, -1, -1), upper=False)
        w = torch.linalg.solve_triangular(L, Y, upper=False)
        means.append(hp.mean_constant + (A.transpose(-1, -2) @ w)[..., 0])
        _ = model.kernel(query, query) - A.transpose(-1, -2) @ A
    return torch.cat(means, 0)


def fantasy_benchmark(sizes, counts, reps: int = 5, dim: int = 3, seed: int = 0) -> list[dict]:
    """Fast fantasy update versus from-scratch conditioning, both with a posterior query."""
    rows = []
    for n in sizes:
        if n > 2048:
            raise ValueError("sizes above 2048 are not supported")
        model = _bench_model(n, dim, seed + n)
        rng = np.random.default_rng(seed)
        x_new = torch.as_tensor(rng.uniform(size=(1, dim)), dtype=DTYPE)
        query = torch.as_tensor(rng.uniform(size=(1, dim)), dtype=DTYPE)
        for m in counts:
            y_new = torch.as_tensor(rng.standard_normal((m, 1)), dtype=DTYPE)

            def fast():
                with torch.no_grad():
                    fantasize(model, x_new, y_new).posterior(query)

            def naive():
                with torch.no_grad():
                    naive_conditioned_posterior(model, x_new, y_new, query)

            f = _median_time(fast, reps)
            s = _median_time(naive, reps)
            rows.append({"n": n, "m": m, "fast_s": f, "naive_s": s, "speedup": s / f})
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (r[k] if k in ("n", "m") else f"{r[k]:.6g}") for k in BENCH_COLUMNS})
    return buf.getvalue()


# --- entry point -----------------------------------------------------------------


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse usage errors
        return 1 if exc.code else 0

    if cfg.fantasy_bench:
        rows = fantasy_benchmark(cfg.bench_sizes, cfg.bench_counts, cfg.bench_reps, seed=cfg.seed)
        path = os.path.join(cfg.out, "fantasy_bench.csv")
        _atomic_write(path, bench_csv(rows))
        print(f"wrote {path}")
        if not cfg.functions:
            return 0

    policies = [parse_policy(s, cfg.fantasy_counts) for s in cfg.policies]
    aggs, traces = run_experiment(
        cfg.functions, policies, cfg.repeats, cfg.seed, cfg.iterations, cfg.n_init, cfg.threads
    )
    csv_path, jsonl_path = emit_results(aggs, traces, cfg.out, cfg.wall_time)
    for a in aggs:
        print(f"{a.function:12s} {a.policy:14s} GAP {a.mean_gap:.3f} +- {a.stderr_gap:.3f}  "
              f"{a.mean_time_per_iter:.2f}s/iter  failures {a.failures}")
    print(f"wrote {csv_path} and {jsonl_path}")
    return 2 if any(t.error for t in traces) else 0


if __name__ == "__main__":
    sys.exit(main())
