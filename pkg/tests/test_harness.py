import dataclasses

import numpy as np
import pytest

from execlab import cli
from execlab.ddql import FeatureMode, load_policy
from execlab.harness import (
    CSV_SCHEMA,
    ExperimentConfig,
    InvariantViolation,
    benchmark_strategies,
    check_report,
    config_from_mapping,
    delta_pnl,
    export_figures,
    load_config,
    parse_config_text,
    read_csv,
    run_benchmark,
    run_experiment,
    write_csv,
)
from execlab.market_sim import expected_cost, linear_trajectory
from execlab.strategies import twap

TINY = {"episodes": 40, "test_episodes": 30, "memory": 200}


def tiny(scenario="constant", mode="QT", **kw):
    return ExperimentConfig(scenario=scenario, mode=mode, train=dict(TINY), **kw)


class TestDeltaPnl:
    def test_equal(self):
        assert delta_pnl(199.8, 199.8) == 0.0

    def test_values(self):
        assert delta_pnl(199.80, 199.70) == pytest.approx(5.0075, abs=5e-5)
        assert delta_pnl(199.70, 199.80) == pytest.approx(-5.0050, abs=5e-5)

    def test_elementwise(self):
        out = delta_pnl([199.8, 199.7], [199.7, 199.8])
        assert out.shape == (2,) and out[0] > 0 > out[1]

    @pytest.mark.parametrize("bench", [0.0, -1.0])
    def test_rejects_non_positive(self, bench):
        with pytest.raises(ValueError):
            delta_pnl(1.0, bench)


class TestConfig:
    TEXT = """# sample
schema = execlab-config/1
scenario = stochastic_low   # CIR impacts
mode = qts
seed = 7
episodes = 123
S0 = 12.5
cir.omega = 0.5
cir.low_lambda = 2
"""

    def test_parse(self):
        cfg = config_from_mapping(parse_config_text(self.TEXT))
        assert cfg.scenario == "stochastic_low" and cfg.mode is FeatureMode.QTS and cfg.seed == 7
        assert cfg.train_config().episodes == 123
        assert cfg.market.S0 == 12.5
        assert cfg.cir_low.omega == 0.5 and cfg.cir_low.lambda_kappa == 2.0
        assert cfg.cir_high.lambda_alpha == 5.0
        assert cfg.family == "stochastic"

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(self.TEXT)
        assert load_config(p).seed == 7

    @pytest.mark.parametrize("text", [
        "scenario = constant\n",
        "schema = execlab-config/9\n",
        "schema = execlab-config/1\nbogus = 1\n",
        "schema = execlab-config/1\nseed = 1\nseed = 2\n",
        "schema = execlab-config/1\nnot a pair\n",
        "schema = execlab-config/1\nscenario = sideways\n",
    ])
    def test_errors(self, text):
        with pytest.raises(ValueError):
            config_from_mapping(parse_config_text(text))

    def test_feller_violation_rejected(self):
        text = "schema = execlab-config/1\nscenario = stochastic_low\ncir.sigma_kappa = 0.5\n"
        with pytest.raises(ValueError, match="Feller"):
            config_from_mapping(parse_config_text(text))

    def test_non_positive_linear_impact_rejected(self):
        with pytest.raises(ValueError):
            config_from_mapping(parse_config_text("schema = execlab-config/1\ndec.alpha0 = 0.001\n"))

    def test_mixed_doubles_budget(self):
        assert ExperimentConfig(scenario="mixed_test_decreasing").train_config().episodes == 20_000
        train, test = ExperimentConfig(scenario="mixed_test_decreasing").scenarios()
        assert train.kind == "mixed" and test.name == "decreasing"

    def test_profiles(self):
        assert ExperimentConfig(profile="smoke").train_config().episodes == 2000
        assert ExperimentConfig().train_config().test_episodes == 5000


class TestCsv:
    def test_format(self, tmp_path):
        p = tmp_path / "x.csv"
        write_csv(p, ["a", "b"], [(1, 0.5), (2, np.float64(1e-12))], "demo")
        raw = p.read_bytes()
        assert b"\r" not in raw
        lines = raw.decode().split("\n")
        assert lines[0] == f"# {CSV_SCHEMA} demo"
        assert lines[1] == "a,b" and lines[2] == "1,0.5"
        kind, rows = read_csv(p)
        assert kind == "demo" and float(rows[1]["b"]) == 1e-12

    def test_missing_schema(self, tmp_path):
        p = tmp_path / "y.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_csv(p)


class TestBenchmarks:
    def test_twap_constant(self):
        cfg = ExperimentConfig()
        _, test = cfg.scenarios()
        res = run_benchmark(benchmark_strategies(cfg)["twap"], test, 5000, seed=0)
        assert res.shortfall.mean() == pytest.approx(0.26, abs=0.01)

    def test_theoretical_equals_twap_on_constant(self):
        cfg = ExperimentConfig()
        _, test = cfg.scenarios()
        s = benchmark_strategies(cfg)
        a = run_benchmark(s["twap"], test, 200, seed=1)
        b = run_benchmark(s["theoretical"], test, 200, seed=1)
        assert np.array_equal(a.shortfall, b.shortfall)

    def test_theoretical_increasing_front_loads(self):
        cfg = ExperimentConfig(scenario="increasing")
        _, test = cfg.scenarios()
        res = run_benchmark(benchmark_strategies(cfg)["theoretical"], test, 5, seed=0)
        hold = res.holdings[0]
        tw = twap(20, 10).holdings
        assert hold[1] < tw[1] and np.all(hold <= tw)
        v = res.volumes[0]
        assert expected_cost(v, linear_trajectory(cfg.increasing, 10)) < 0.75 * expected_cost(tw[:-1] - tw[1:], linear_trajectory(cfg.increasing, 10))

    def test_barger_lorig_stochastic_low(self):
        cfg = ExperimentConfig(scenario="stochastic_low")
        _, test = cfg.scenarios()
        res = run_benchmark(benchmark_strategies(cfg)["theoretical"], test, 1000, seed=0)
        assert np.all(res.volumes.sum(axis=1) == 20)
        # loose band around the TWAP cost of 0.26
        assert 0.25 < res.shortfall.mean() < 0.35

    def test_paired_paths(self):
        cfg = ExperimentConfig(scenario="stochastic_high")
        _, test = cfg.scenarios()
        s = benchmark_strategies(cfg)["twap"]
        a = run_benchmark(s, test, 20, seed=4)
        b = run_benchmark(s, test, 20, seed=4)
        assert np.array_equal(a.cash, b.cash)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = tiny(scenario="increasing", mode="QTS", out=out)
    report, policy = run_experiment(cfg)
    return cfg, report, policy, out


class TestExperiment:
    def test_report_consistency(self, run):
        cfg, report, _, _ = run
        s = report.summary()
        assert s["episodes"] == 30
        assert s["ddql_mean_is"] == pytest.approx(np.mean(report.agent.shortfall), abs=1e-12)
        assert set(report.benchmarks) == {"twap", "theoretical"}
        assert np.allclose(report.delta("twap"), delta_pnl(report.agent.cash, report.benchmarks["twap"].cash))

    def test_outputs_written(self, run):
        _, _, _, out = run
        for name in ("episodes.csv", "summary.csv", "training_log.csv", "policy.bin", "holdings.csv",
                     "actions_qt.csv", "heatmap.csv", "trajectory.csv", "schedule_theoretical.csv",
                     "schedule_twap.csv"):
            assert (out / name).exists(), name
        kind, rows = read_csv(out / "training_log.csv")
        assert kind == "training-log" and len(rows) == 40
        assert list(rows[0]) == ["episode", "epsilon", "episode_IS", "mean_loss"]

    def test_figures(self, run, tmp_path):
        _, report, policy, _ = run
        export_figures(report, policy, tmp_path)
        _, rows = read_csv(tmp_path / "holdings.csv")
        assert [float(r["twap"]) for r in rows] == list(range(20, -1, -2))
        _, heat = read_csv(tmp_path / "heatmap.csv")
        assert all(int(r["action"]) <= int(r["q"]) for r in heat)
        assert {r["price_level"] for r in heat} == {"-1.0", "-0.5", "0.0", "0.5", "1.0"}
        _, acts = read_csv(tmp_path / "actions_qt.csv")
        assert all(float(r["mean_action"]) <= int(r["q"]) for r in acts)

    def test_bit_reproducible(self, run):
        cfg, report, _, _ = run
        again, _ = run_experiment(dataclasses.replace(cfg, out=None))
        assert again.agent.cash.tobytes() == report.agent.cash.tobytes()
        assert again.summary() == pytest.approx(report.summary(), nan_ok=True)

    def test_check_report_catches_violation(self, run):
        _, report, _, _ = run
        bad = dataclasses.replace(report.agent, volumes=report.agent.volumes.copy())
        bad.volumes[0, 0] += 1
        with pytest.raises(InvariantViolation):
            check_report(dataclasses.replace(report, agent=bad))


class TestCli:
    @pytest.fixture
    def cfg_file(self, tmp_path):
        p = tmp_path / "tiny.cfg"
        p.write_text("schema = execlab-config/1\nscenario = constant\nepisodes = 30\ntest_episodes = 20\nmemory = 200\n")
        return p

    def test_train_evaluate_export(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg_file), "--out", str(out), "--seed", "2"]) == 0
        ckpt = out / "policy.bin"
        assert load_policy(ckpt).mode is FeatureMode.QT
        assert cli.main(["evaluate", "--config", str(cfg_file), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        assert (out / "summary.csv").exists()
        assert cli.main(["export-policy", "--checkpoint", str(ckpt), "--out", str(tmp_path / "fig")]) == 0
        _, rows = read_csv(tmp_path / "fig" / "heatmap.csv")
        assert len(rows) == 10 * 21

    def test_benchmark(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "b"
        assert cli.main(["benchmark", "--config", str(cfg_file), "--strategy", "twap", "--out", str(out)]) == 0
        kind, rows = read_csv(out / "benchmark_twap.csv")
        assert kind == "benchmark" and len(rows) == 20
        assert cli.main(["benchmark", "--config", str(cfg_file), "--strategy", "vwap", "--out", str(out)]) != 0

    def test_reproduce(self, tmp_path):
        base = tmp_path / "base.cfg"
        base.write_text("schema = execlab-config/1\nepisodes = 10\ntest_episodes = 5\nmemory = 100\n")
        assert cli.main(["reproduce", "table2", "--config", str(base), "--out", str(tmp_path / "t2")]) == 0
        kind, rows = read_csv(tmp_path / "t2" / "table2.csv")
        assert kind == "table2" and [r["features"] for r in rows] == ["QT", "QTS"]

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("schema = execlab-config/1\nscenario = constant\nlr = nope\n")
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2
