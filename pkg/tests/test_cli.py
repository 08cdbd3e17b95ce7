import csv
import io
import json
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lookahead_bo import benchmarks, cli
from lookahead_bo.cli import (
    BENCH_COLUMNS,
    TRACE_COLUMNS,
    ConfigError,
    RunConfig,
    bench_csv,
    emit_config,
    fantasy_benchmark,
    main,
    parse_config,
)
from lookahead_bo.optimize import OptimizationError, parse_policy


def test_policy_flags_parse_to_layouts():
    cfg = parse_config(["--function", "shekel5", "--policy", "3-step"])
    assert parse_policy(cfg.policies[0]).layout(4).fantasy_counts == (10, 5)
    cfg = parse_config(["--function", "shekel5", "--policy", "4-path"])
    pol = parse_policy(cfg.policies[0])
    assert pol.fantasy_counts == (1, 1, 1) and pol.mode == "gh"


def test_missing_function_names_the_key():
    with pytest.raises(ConfigError, match="experiment.functions"):
        parse_config(["--policy", "ei"])


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown policy"):
        parse_config(["--function", "dropwave", "--policy", "7-walk"])
    with pytest.raises(ConfigError, match="fantasy counts"):
        parse_config(["--function", "dropwave", "--policy", "3-step", "--fantasy-counts", "4"])
    with pytest.raises(ConfigError, match="unknown function"):
        parse_config(["--function", "branin"])
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config([], text="experiment:\n  functions: [dropwave]\n  colour: red\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        parse_config([], text="plots:\n  dpi: 3\n")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config([], text="experiment: [unclosed\n")


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("experiment:\n  functions: [dropwave]\n  repeats: 4\n  seed: 3\noutput:\n  dir: a\n")
    cfg = parse_config(["--config", str(path), "--repeats", "2", "--out", "b"])
    assert cfg.functions == ["dropwave"] and cfg.repeats == 2 and cfg.seed == 3 and cfg.out == "b"


names = st.lists(st.sampled_from(sorted(benchmarks.FUNCTIONS)), min_size=1, max_size=3, unique=True)
specs = st.lists(st.sampled_from(["ei", "2-step", "3-path", "3-eno", "binoculars-12"]), min_size=1, max_size=3)


@settings(max_examples=30, deadline=None)
@given(names, specs, st.integers(1, 20), st.one_of(st.none(), st.integers(0, 50)), st.integers(0, 2**31),
       st.booleans(), st.integers(1, 8))
def test_config_round_trip(functions, policies, repeats, iters, seed, wall_time, threads):
    cfg = RunConfig(functions=functions, policies=policies, repeats=repeats, iterations=iters,
                    seed=seed, wall_time=wall_time, threads=threads)
    assert parse_config([], text=emit_config(cfg)) == cfg


# outputs ------------------------------------------------------------------------


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_schema_valid_outputs(tmp_path):
    out = tmp_path / "res"
    code = main(["--function", "dropwave,ackley5", "--policy", "ei", "--iters", "1", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "traces.csv")
    header = open(out / "traces.csv").readline().strip().split(",")
    assert header == TRACE_COLUMNS + [f"x{i}" for i in range(5)]
    by_fn = {}
    for r in rows:
        by_fn.setdefault(r["function"], []).append(r)
        assert 0.0 <= float(r["gap"]) <= 1.0
        assert int(r["repeat"]) == 0 and int(r["iteration"]) >= 0
        float(r["best_y"]), float(r["wall_time_s"])
    assert len(by_fn["dropwave"]) == 2 * 2 + 1 and len(by_fn["ackley5"]) == 2 * 5 + 1
    assert all(r["x2"] == "" for r in by_fn["dropwave"])
    aggs = [json.loads(line) for line in open(out / "aggregates.jsonl")]
    assert [a["function"] for a in aggs] == ["dropwave", "ackley5"]
    assert set(aggs[0]) >= {"function", "policy", "mean_gap", "stderr_gap", "mean_time_per_iter"}
    assert not [f for f in os.listdir(out) if f.startswith(".tmp")]


def test_partial_failure_exit_code(tmp_path, monkeypatch):
    real = benchmarks.propose_next
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OptimizationError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(benchmarks, "propose_next", flaky)
    code = main(["--function", "dropwave", "--repeats", "2", "--iters", "1", "--out", str(tmp_path)])
    assert code == 2


def test_configuration_error_exit_code(tmp_path, capsys):
    assert main(["--policy", "ei", "--out", str(tmp_path)]) == 1
    assert "experiment.functions" in capsys.readouterr().err
    assert main(["--bogus-flag"]) == 1


def test_write_failure_names_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="traces.csv"):
        cli.emit_results([], [], str(blocker / "sub"))


def test_fantasy_benchmark_small(tmp_path):
    rows = fantasy_benchmark([32], [1, 4], reps=2)
    assert [(r["n"], r["m"]) for r in rows] == [(32, 1), (32, 4)]
    assert all(r["fast_s"] > 0 and r["naive_s"] > 0 for r in rows)
    table = list(csv.DictReader(io.StringIO(bench_csv(rows))))
    assert list(table[0]) == BENCH_COLUMNS
    assert main(["--fantasy-bench", "--bench-sizes", "16", "--bench-counts", "2", "--bench-reps", "1",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "fantasy_bench.csv").exists()
    with pytest.raises(ConfigError):
        parse_config(["--fantasy-bench", "--bench-sizes", "4096"])


def test_naive_and_fast_paths_agree():
    import numpy as np
    import torch
    from lookahead_bo.fantasy import fantasize

    model = cli._bench_model(40, 3, 0)
    rng = np.random.default_rng(1)
    x = torch.as_tensor(rng.uniform(size=(1, 3)))
    q = torch.as_tensor(rng.uniform(size=(1, 3)))
    y = torch.as_tensor(rng.standard_normal((20, 1)))
    naive = cli.naive_conditioned_posterior(model, x, y, q)
    fast = fantasize(model, x, y).posterior(q).mean
    assert torch.allclose(naive, fast, atol=1e-8)
