import io

import numpy as np
import pytest

from partial_options.harness import (RESULT_COLUMNS, ExperimentConfig, ResultRow, RunResult, read_results,
                                     results_text, run_experiment, run_learned_affordance_sweep, run_seed,
                                     seed_from_env, sweep_summary, transitions_to_success, write_results,
                                     write_set_sizes)

TINY = ExperimentConfig(train_set="pickup_drop_at_goal", plan_set="pickup_drop_at_goal", budget=2000,
                        eval_every=50, episodes=50, seeds=(0, 1), record_wall_time=False)


def _table(results):
    return results_text(row for r in results for row in r.rows)


def test_sequential_runs_are_byte_identical():
    assert _table(run_experiment(TINY)) == _table(run_experiment(TINY))


def test_rows_are_well_formed():
    result = run_seed(TINY, 3)
    assert [r.env_transitions for r in result.rows] == [1000, 2000]
    assert [r.learner_updates for r in result.rows] == [50, 100]
    assert all(r.train_set_size == r.plan_set_size == 4000 and r.learned_set_size == 0 for r in result.rows)
    assert all(r.wall_ms == 0 for r in result.rows)


@pytest.mark.slow
def test_concurrent_mode_matches_sequential():
    cfg = TINY.replace(lr=1e-3, budget=20_000, eval_every=500, episodes=200)
    seq = run_experiment(cfg)
    conc = run_experiment(cfg.replace(mode="concurrent"))
    assert not any(r.diverged for r in seq + conc)
    final_seq = np.mean([r.rows[-1].success_rate for r in seq])
    final_conc = np.mean([r.rows[-1].success_rate for r in conc])
    assert abs(final_seq - final_conc) <= 0.05
    for r in conc:
        assert r.rows[-1].env_transitions == 20_000


def test_divergence_is_reported_not_raised():
    result = run_seed(TINY.replace(train_set="everything", lr=5.0), 0)
    assert result.diverged and "loss" in result.divergence


def test_stop_at_success_threshold():
    result = run_seed(TINY.replace(stop_success=0.0), 0)
    assert len(result.rows) == 1


def test_learned_sweep_at_k_zero_affords_everything():
    sweep = run_learned_affordance_sweep(TINY.replace(seeds=(0,), eval_every=20), ks=[0.0, 0.9])
    assert all(size == 37_500 for _, size in sweep[0.0][0].set_sizes)
    assert sweep[0.9][0].set_sizes[-1][1] < 37_500
    buf = io.StringIO()
    write_set_sizes(sweep, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "k,seed,env_transitions,learned_set_size"
    assert lines[1] == "0.0,0,1000,37500"
    summary = sweep_summary(sweep)
    assert [s["k"] for s in summary] == [0.0, 0.9]
    assert summary[0]["final_set_size"] == 37_500


# --- configuration -------------------------------------------------------------------

def test_config_file_and_precedence(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# comment\ntrain_set = pickup_drop\nlr=0.001  # inline\nseeds = 4,5,6,7\n\n")
    cfg = ExperimentConfig.from_file(path, overrides={"lr": "0.01"}, defaults={"budget": "7", "lr": "1"})
    assert cfg.train_set == "pickup_drop"
    assert cfg.lr == 0.01
    assert cfg.budget == 7
    assert cfg.seeds == (4, 5, 6, 7)


def test_config_value_parsing():
    cfg = ExperimentConfig.from_mapping({"classifier": "yes", "window": "none", "k_sweep": "0.1 0.2",
                                         "stop_success": "0.9", "plan_set": "learned"})
    assert cfg.classifier and cfg.window is None and cfg.k_sweep == (0.1, 0.2) and cfg.stop_success == 0.9


@pytest.mark.parametrize("values", [{"bogus": "1"}, {"classifier": "maybe"}, {"seeds": "1,1"},
                                    {"plan_set": "learned"}, {"train_set": "some"}, {"mode": "async"},
                                    {"lr": "0"}, {"k": "1.0"}, {"env": "gridworld"}])
def test_bad_configs_are_rejected(values):
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping(values)


def test_config_line_without_equals(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("lr 0.1\n")
    with pytest.raises(ValueError):
        ExperimentConfig.from_file(path)


def test_seed_from_env(monkeypatch):
    monkeypatch.delenv("PARTIAL_OPTIONS_SEED", raising=False)
    assert seed_from_env(3) == 3
    monkeypatch.setenv("PARTIAL_OPTIONS_SEED", "11")
    assert seed_from_env(3) == 11


# --- result tables -------------------------------------------------------------------

def test_result_table_round_trip():
    rows = [ResultRow(0, 1000, 500, 0.25, 4000, 37500, 0, 12), ResultRow(0, 2000, 1000, 1 / 3, 4000, 37500, 0, 20)]
    buf = io.StringIO()
    write_results(rows, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == ",".join(RESULT_COLUMNS)
    assert read_results(io.StringIO(text)) == rows


def test_result_validation():
    with pytest.raises(ValueError):
        write_results([ResultRow(0, 1, 1, 1.5, 1, 1, 0, 0)], io.StringIO())
    with pytest.raises(ValueError):
        ResultRow(0, -1, 1, 0.5, 1, 1, 0, 0).validate()
    with pytest.raises(ValueError):
        read_results(io.StringIO("a,b\n1,2\n"))


def test_transitions_to_success():
    rows = [ResultRow(0, t, 0, s, 1, 1, 0, 0) for t, s in [(1000, 0.5), (2000, 0.95), (3000, 0.7)]]
    assert transitions_to_success(RunResult(0, rows)) == 2000
    assert transitions_to_success(RunResult(0, rows), 0.99) == float("inf")
