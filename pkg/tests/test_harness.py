import numpy as np
import pytest
from scipy import stats

from ivrl.harness import (CellResult, ConfigError, IntervalUndefined, benchmark_cells, config_hash,
                          confidence_interval, figure_checks, parse_config, plot_csv, plot_rows, policy_from_json,
                          policy_to_json, results_csv, run_cell, run_cells, run_dir, svg_chart, write_benchmark)
from ivrl.funcspace import FeatureMap, SoftmaxPolicy

SMALL = """\
[env]
name = tabular
[data]
n = 40
t = 8
[learner]
n_iter = 3
w_box = 10
[evaluation]
n_rollouts = 100
[benchmark]
seeds = 2
methods = pess_IV, no_pess_no_IV, vf_dual
"""


def test_defaults_resolve():
    cfg = parse_config("")
    assert cfg.get("data", "n") == 200 and cfg.get("data", "t") == 100
    assert cfg.get("benchmark", "seeds") == 5


@pytest.mark.parametrize("text,path", [
    ("[data]\nnn = 3\n", "data.nn"),
    ("[bogus]\nx = 1\n", "[bogus]"),
    ("[data]\nn = many\n", "data.n"),
    ("[env]\ngamma = 1.5\n", "env.gamma"),
    ("[benchmark]\nmethods = pess_IV, magic\n", "benchmark.methods"),
])
def test_config_errors_name_key_path(text, path):
    with pytest.raises(ConfigError, match=path.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_replace_validates():
    cfg = parse_config("")
    assert cfg.replace(data__n=7).get("data", "n") == 7
    with pytest.raises(ConfigError):
        cfg.replace(data__n=0)
    with pytest.raises(ConfigError):
        cfg.replace(data__zzz=1)


def test_resolved_config_round_trips():
    cfg = parse_config(SMALL)
    again = parse_config(cfg.to_ini())
    assert again.values == cfg.values
    assert config_hash(again) == config_hash(cfg)


def test_identical_values_give_zero_width():
    mean, lo, hi = confidence_interval([2.0, 2.0, 2.0])
    assert mean == lo == hi == 2.0


def test_two_value_interval_arithmetic():
    mean, lo, hi = confidence_interval([0.0, 1.0])
    half = stats.t.ppf(0.975, 1) * np.sqrt(0.5) / np.sqrt(2)
    assert mean == 0.5
    assert hi - mean == pytest.approx(half, rel=1e-12)
    assert mean - lo == pytest.approx(half, rel=1e-12)


def test_single_seed_interval_undefined():
    with pytest.raises(IntervalUndefined):
        confidence_interval([1.0])


def test_interval_coverage():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(2000):
        _, lo, hi = confidence_interval(rng.normal(size=5))
        hits += lo <= 0 <= hi
    assert abs(hits / 2000 - 0.95) < 0.015


def _cells(values):
    return [CellResult(m, i, v, 0.0, 0.0) for m, vs in values.items() for i, v in enumerate(vs)]


def test_figure_checks_pass_on_expected_ordering():
    results = _cells({
        "behavior": [-14, -14.1, -13.9], "pess_IV": [-9, -9.1, -9.05], "no_pess_IV": [-9, -9.5, -8.6],
        "pess_no_IV": [-20, -30, -25], "no_pess_no_IV": [-20, -31, -25],
    })
    checks = figure_checks(results)
    assert len(checks) == 5 and all(ok for _, ok, _ in checks)


def test_figure_checks_flag_violations():
    results = _cells({
        "behavior": [-14, -14.1, -13.9], "pess_IV": [-30, -9.1, -9.05], "no_pess_IV": [-9, -9.5, -8.6],
        "pess_no_IV": [-5, -5, -5], "no_pess_no_IV": [-20, -31, -25],
    })
    failed = {name for name, ok, _ in figure_checks(results) if not ok}
    assert failed == {"pess_IV beats behavior", "pess_no_IV does not beat behavior + pooled se",
                      "pess_IV sd <= no_pess_IV sd"}


def test_benchmark_cells_include_behavior():
    cells = benchmark_cells(parse_config(SMALL))
    assert ("behavior", 0) in cells and ("behavior", 1) in cells
    assert len(cells) == 4 * 2


def test_results_csv_schema_and_runtime_column():
    res = [CellResult("pess_IV", 0, -1.5, 0.1, 2.25)]
    assert results_csv(res) == "method,seed,j_mean,j_se,runtime_s\npess_IV,0,-1.5,0.10000000000000001,\n"
    assert results_csv(res, record_runtime=True).strip().endswith(",2.25")


def test_plot_data_and_svg():
    rows = plot_rows(_cells({"a": [1.0, 2.0], "b": [3.0, 3.0]}))
    text = plot_csv(rows)
    assert text.splitlines()[0] == "method,mean,ci_lo,ci_hi"
    svg = svg_chart(rows)
    assert svg.startswith("<svg") and svg.count("<circle") == 2


def test_policy_json_round_trip():
    pol = SoftmaxPolicy(np.arange(6.0).reshape(2, 3) / 7, FeatureMap(2, (0.5, 1.5)))
    back = policy_from_json(policy_to_json(pol))
    np.testing.assert_array_equal(back.w_pi, pol.w_pi)
    assert back.fmap == pol.fmap


@pytest.fixture(scope="module")
def small_run():
    cfg = parse_config(SMALL)
    return cfg, run_cells(cfg, benchmark_cells(cfg))


def test_tabular_cells_run(small_run):
    cfg, results = small_run
    assert [(r.method, r.seed) for r in results] == benchmark_cells(cfg)
    assert all(np.isfinite(r.j_mean) for r in results)
    assert all(r.learn is not None for r in results if r.method != "behavior")


def test_benchmark_reproducible_across_workers(small_run):
    cfg, results = small_run
    again = run_cells(cfg, benchmark_cells(cfg), workers=2)
    assert results_csv(again) == results_csv(results)


def test_run_directory_contents(small_run, tmp_path, monkeypatch):
    cfg, results = small_run
    monkeypatch.setenv("IVRL_OUTPUT_ROOT", str(tmp_path))
    out = run_dir(cfg, "benchmark")
    assert out.parent == tmp_path
    write_benchmark(out, cfg, results)
    names = {p.name for p in out.iterdir()}
    assert {"config.ini", "config.resolved.ini", "results.csv", "timings.csv", "plot_data.csv", "chart.svg",
            "traces"} <= names
    assert (out / "config.ini").read_text() == SMALL
    assert len(list((out / "traces").iterdir())) == 3 * 2
    trace = (out / "traces" / "pess_IV_seed0.csv").read_text().splitlines()
    assert trace[0] == "iter,objective,grad_norm,param_hash" and len(trace) == 1 + 4


def test_single_cell_matches_sweep(small_run):
    cfg, results = small_run
    one = run_cell(cfg, "vf_dual", 1)
    ref = next(r for r in results if r.method == "vf_dual" and r.seed == 1)
    assert one.j_mean == ref.j_mean
