"""Experiment orchestration: scenarios, paired benchmarks, reports and CSV export."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ddql
from .ddql import EvalResult, FeatureMode, Policy, TrainConfig, TrainingLog
from .market_sim import (
    CIRImpactSpec,
    ImpactTrajectory,
    LinearImpactSpec,
    MarketParams,
    Scenario,
    constant_trajectory,
    linear_trajectory,
    schedule_policy,
)
from .strategies import barger_lorig_action, optimal_deterministic_schedule, optimal_integer_schedule, twap

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "execlab-config/1"
CSV_SCHEMA = "execlab-csv/1"

SCENARIO_NAMES = (
    "constant",
    "increasing",
    "decreasing",
    "mixed_test_increasing",
    "mixed_test_decreasing",
    "stochastic_low",
    "stochastic_high",
)

INCREASING = LinearImpactSpec(kappa0=0.0001, beta_kappa=0.0002, alpha0=0.0001, beta_alpha=0.0004)
DECREASING = LinearImpactSpec(kappa0=0.002, beta_kappa=-0.0002, alpha0=0.004, beta_alpha=-0.0004)
CONSTANT = (0.001, 0.002)


def cir_spec(reversion: float) -> CIRImpactSpec:
    return CIRImpactSpec(
        lambda_kappa=reversion,
        lambda_alpha=reversion,
        theta_kappa=0.001,
        theta_alpha=0.002,
        sigma_kappa=0.002,
        sigma_alpha=0.002,
        omega=0.9,
    )


PROFILES = {
    "full": {"episodes": 10_000, "test_episodes": 5_000},
    "smoke": {"episodes": 2_000, "test_episodes": 500},
}


@dataclass
class ExperimentConfig:
    scenario: str = "constant"
    mode: FeatureMode = FeatureMode.QT
    seed: int = 0
    out: Path | None = None
    profile: str = "full"
    train: dict = field(default_factory=dict)
    market: MarketParams = field(default_factory=MarketParams)
    kappa: float = CONSTANT[0]
    alpha: float = CONSTANT[1]
    increasing: LinearImpactSpec = INCREASING
    decreasing: LinearImpactSpec = DECREASING
    cir_low: CIRImpactSpec = field(default_factory=lambda: cir_spec(1.0))
    cir_high: CIRImpactSpec = field(default_factory=lambda: cir_spec(5.0))

    def __post_init__(self):
        if self.scenario not in SCENARIO_NAMES:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIO_NAMES}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if isinstance(self.mode, str):
            self.mode = FeatureMode(self.mode.upper())
        # build once so invalid impact parameters fail here
        self.scenarios()

    @property
    def family(self) -> str:
        if self.scenario.startswith("mixed"):
            return "mixed"
        if self.scenario.startswith("stochastic"):
            return "stochastic"
        return "deterministic" if self.scenario != "constant" else "constant"

    def train_config(self) -> TrainConfig:
        opts = {**PROFILES[self.profile], **self.train}
        cfg = TrainConfig(mode=self.mode, seed=self.seed, **opts)
        if self.family == "mixed" and "episodes" not in self.train:
            # one full training budget per regime
            cfg = dataclasses.replace(cfg, episodes=2 * cfg.episodes)
        return cfg

    def scenarios(self) -> tuple[Scenario, Scenario]:
        """(training scenario, test scenario)."""
        p = self.market
        inc = Scenario("increasing", "linear", p, linear=self.increasing)
        dec = Scenario("decreasing", "linear", p, linear=self.decreasing)
        if self.scenario == "constant":
            s = Scenario("constant", "constant", p, constant=(self.kappa, self.alpha))
            return s, s
        if self.scenario == "increasing":
            return inc, inc
        if self.scenario == "decreasing":
            return dec, dec
        if self.scenario.startswith("mixed"):
            mixed = Scenario("mixed", "mixed", p, parts=(inc, dec))
            return mixed, inc if self.scenario.endswith("increasing") else dec
        spec = self.cir_low if self.scenario == "stochastic_low" else self.cir_high
        s = Scenario(self.scenario, "cir", p, cir=spec)
        return s, s


# --- config files ------------------------------------------------------------
#
# Flat "key = value" lines; '#' starts a comment. The first non-comment line
# must be "schema = execlab-config/1". Keys:
#   scenario, mode, seed, profile, out
#   episodes, test_episodes, batch_size, reset_every, decay, gamma, lr, memory
#   S0, sigma, q0, N
#   kappa, alpha                                  (constant)
#   inc.kappa0, inc.beta_kappa, inc.alpha0, inc.beta_alpha   (increasing / mixed)
#   dec.kappa0, dec.beta_kappa, dec.alpha0, dec.beta_alpha   (decreasing / mixed)
#   cir.theta_kappa, cir.theta_alpha, cir.sigma_kappa, cir.sigma_alpha, cir.omega,
#   cir.low_lambda, cir.high_lambda                          (stochastic)

_TRAIN_KEYS = {"episodes": int, "test_episodes": int, "batch_size": int, "reset_every": int,
               "decay": float, "gamma": float, "lr": float, "memory": int}
_MARKET_KEYS = {"S0": float, "sigma": float, "q0": int, "N": int}


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if not values and key != "schema":
            raise ValueError("config must start with 'schema = %s'" % CONFIG_SCHEMA)
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    if values.get("schema") != CONFIG_SCHEMA:
        raise ValueError(f"unsupported config schema {values.get('schema')!r}")
    return values


def config_from_mapping(values: dict[str, str]) -> ExperimentConfig:
    values = dict(values)
    values.pop("schema", None)
    kw: dict = {}
    train: dict = {}
    market: dict = {}
    inc = dataclasses.asdict(INCREASING)
    dec = dataclasses.asdict(DECREASING)
    cir = dataclasses.asdict(cir_spec(1.0))
    low, high = 1.0, 5.0
    for key, value in values.items():
        if key in ("scenario", "mode", "profile"):
            kw[key] = value
        elif key == "seed":
            kw["seed"] = int(value)
        elif key == "out":
            kw["out"] = Path(value)
        elif key in ("kappa", "alpha"):
            kw[key] = float(value)
        elif key in _TRAIN_KEYS:
            train[key] = _TRAIN_KEYS[key](value)
        elif key in _MARKET_KEYS:
            market[key] = _MARKET_KEYS[key](value)
        elif key.startswith("inc.") and key[4:] in inc:
            inc[key[4:]] = float(value)
        elif key.startswith("dec.") and key[4:] in dec:
            dec[key[4:]] = float(value)
        elif key == "cir.low_lambda":
            low = float(value)
        elif key == "cir.high_lambda":
            high = float(value)
        elif key.startswith("cir.") and key[4:] in cir and not key[4:].startswith("lambda"):
            cir[key[4:]] = float(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    kw["train"] = train
    kw["market"] = MarketParams(**market)
    kw["increasing"] = LinearImpactSpec(**inc)
    kw["decreasing"] = LinearImpactSpec(**dec)
    kw["cir_low"] = CIRImpactSpec(**{**cir, "lambda_kappa": low, "lambda_alpha": low})
    kw["cir_high"] = CIRImpactSpec(**{**cir, "lambda_kappa": high, "lambda_alpha": high})
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    return config_from_mapping(parse_config_text(Path(path).read_text()))


# --- metrics -----------------------------------------------------------------


def delta_pnl(cash_agent, cash_bench):
    """Relative cash difference in basis points; works elementwise on arrays."""
    a = np.asarray(cash_agent, dtype=float)
    b = np.asarray(cash_bench, dtype=float)
    if np.any(b <= 0):
        raise ValueError("benchmark cash must be positive")
    out = 1e4 * (a - b) / b
    return float(out) if out.ndim == 0 else out


Strategy = Callable  # act(state, traj) -> volume


def benchmark_strategies(config: ExperimentConfig) -> dict[str, Strategy]:
    """Benchmarks for the test scenario; ``theoretical`` is the family's reference strategy."""
    _, test = config.scenarios()
    p = config.market
    tw = twap(p.q0, p.N).volumes
    out: dict[str, Strategy] = {"twap": schedule_policy(tw)}
    if config.family == "constant":
        out["theoretical"] = out["twap"]
    elif config.family in ("deterministic", "mixed"):
        traj = test.trajectory(0, np.random.default_rng(0))
        out["theoretical"] = schedule_policy(optimal_integer_schedule(traj, p.q0).volumes)
    else:
        spec = test.cir

        def bl(state, traj: ImpactTrajectory):
            return barger_lorig_action(state.q, state.t, p.N, traj.alpha[state.t], traj.kappa[state.t], spec, p.tau)

        out["theoretical"] = bl
    return out


def run_benchmark(strategy: Strategy, scenario: Scenario, episodes: int, seed: int) -> EvalResult:
    """Simulate a benchmark on the same test paths an agent evaluated with ``seed`` sees."""
    return ddql.run_strategy(strategy, scenario, episodes, seed)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    agent: EvalResult
    benchmarks: dict[str, EvalResult]
    training: TrainingLog | None = None

    def summary(self) -> dict[str, float]:
        s = {
            "episodes": len(self.agent.shortfall),
            "ddql_mean_is": _mean(self.agent.shortfall),
            "ddql_std_is": _std(self.agent.shortfall),
        }
        for name, res in self.benchmarks.items():
            d = delta_pnl(self.agent.cash, res.cash) if len(res.cash) else np.zeros(0)
            s[f"{name}_mean_is"] = _mean(res.shortfall)
            s[f"{name}_std_is"] = _std(res.shortfall)
            s[f"dpnl_{name}_mean_bp"] = _mean(d)
            s[f"dpnl_{name}_std_bp"] = _std(d)
            s[f"dpnl_{name}_median_bp"] = float(np.median(d)) if len(d) else math.nan
        return s

    def delta(self, name: str) -> np.ndarray:
        return delta_pnl(self.agent.cash, self.benchmarks[name].cash)


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else math.nan


def _std(x) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else math.nan


def evaluate_with_benchmarks(policy: Policy, config: ExperimentConfig, episodes: int | None = None,
                             training: TrainingLog | None = None) -> ExperimentReport:
    _, test = config.scenarios()
    B = config.train_config().test_episodes if episodes is None else episodes
    agent = ddql.evaluate(policy, B, test, config.seed)
    bench = {name: run_benchmark(s, test, B, config.seed) for name, s in benchmark_strategies(config).items()}
    return ExperimentReport(config, agent, bench, training)


def run_experiment(config: ExperimentConfig, progress_every: int = 0) -> tuple[ExperimentReport, Policy]:
    train_scn, _ = config.scenarios()
    policy, tlog = ddql.train(config.train_config(), train_scn, progress_every=progress_every)
    report = evaluate_with_benchmarks(policy, config, training=tlog)
    check_report(report)
    if config.out is not None:
        write_outputs(report, policy, Path(config.out))
    return report, policy


class InvariantViolation(RuntimeError):
    pass


def check_report(report: ExperimentReport) -> None:
    q0 = report.config.market.q0
    for name, res in [("ddql", report.agent), *report.benchmarks.items()]:
        if len(res.volumes) and np.any(res.volumes.sum(axis=1) != q0):
            raise InvariantViolation(f"{name}: incomplete liquidation")
        if np.any(res.volumes < 0):
            raise InvariantViolation(f"{name}: negative sell volume")
        total = report.config.market.S0 * q0
        if len(res.cash) and not np.allclose(res.cash + res.shortfall, total, rtol=1e-9, atol=0):
            raise InvariantViolation(f"{name}: cash + IS != S0*q0")


# --- CSV output --------------------------------------------------------------


def write_csv(path: Path, columns: list[str], rows, kind: str) -> None:
    """Comma separated, '.' decimals, LF endings; first line names the schema."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_SCHEMA} {kind}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def read_csv(path) -> tuple[str, list[dict[str, str]]]:
    with open(path, newline="") as fh:
        head = fh.readline().strip()
        if not head.startswith(f"# {CSV_SCHEMA}"):
            raise ValueError(f"{path}: missing schema line")
        return head.split()[-1], list(csv.DictReader(fh))


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_trajectory(path: Path, traj: ImpactTrajectory) -> None:
    write_csv(path, ["t", "kappa", "alpha"], zip(range(len(traj)), traj.kappa, traj.alpha), "trajectory")


def write_schedule(path: Path, volumes) -> None:
    v = np.asarray(volumes)
    hold = v.sum() - np.concatenate(([0], np.cumsum(v)))[:-1]
    write_csv(path, ["t", "volume", "holdings"], zip(range(len(v)), v, hold), "schedule")


def write_training_log(path: Path, tlog: TrainingLog) -> None:
    rows = zip(range(len(tlog.episode_is)), tlog.epsilon, tlog.episode_is, tlog.mean_loss)
    write_csv(path, ["episode", "epsilon", "episode_IS", "mean_loss"], rows, "training-log")


def write_report(out: Path, report: ExperimentReport) -> None:
    names = list(report.benchmarks)
    cols = ["episode", "ddql_is", "ddql_cash"]
    for n in names:
        cols += [f"{n}_is", f"{n}_cash", f"dpnl_{n}_bp"]
    deltas = {n: report.delta(n) for n in names}
    rows = []
    for i in range(len(report.agent.shortfall)):
        row = [i, report.agent.shortfall[i], report.agent.cash[i]]
        for n in names:
            b = report.benchmarks[n]
            row += [b.shortfall[i], b.cash[i], deltas[n][i]]
        rows.append(row)
    write_csv(out / "episodes.csv", cols, rows, "episodes")
    summ = report.summary()
    write_csv(out / "summary.csv", ["metric", "value"], summ.items(), "summary")


def export_figures(report: ExperimentReport, policy: Policy, out: Path) -> list[Path]:
    """Plot-ready CSVs: average holdings per step, mean action per (q, t), greedy heatmap."""
    out = Path(out)
    paths = []
    N = report.config.market.N
    hold_cols = {"ddql": report.agent.holdings.mean(axis=0) if len(report.agent.volumes) else np.full(N + 1, math.nan)}
    for name, res in report.benchmarks.items():
        hold_cols[name] = res.holdings.mean(axis=0) if len(res.volumes) else np.full(N + 1, math.nan)
    p = out / "holdings.csv"
    write_csv(p, ["t", *hold_cols], zip(range(N + 1), *hold_cols.values()), "holdings")
    paths.append(p)

    sums: dict[tuple, list[float]] = {}
    hold = report.agent.holdings
    for ep in range(len(report.agent.volumes)):
        for t in range(N):
            key = (t, int(hold[ep, t]))
            sums.setdefault(key, []).append(report.agent.volumes[ep, t])
    rows = [(t, q, float(np.mean(v)), len(v)) for (t, q), v in sorted(sums.items())]
    p = out / "actions_qt.csv"
    write_csv(p, ["t", "q", "mean_action", "count"], rows, "actions-qt")
    paths.append(p)

    heat = ddql.policy_heatmap(policy)
    p = out / "heatmap.csv"
    cols = ["t", "q", "action"] if policy.mode is FeatureMode.QT else ["t", "q", "price_level", "action"]
    write_csv(p, cols, heat, "heatmap")
    paths.append(p)
    return paths


def write_outputs(report: ExperimentReport, policy: Policy, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    if report.training is not None:
        write_training_log(out / "training_log.csv", report.training)
    ddql.save_policy(policy, out / "policy.bin")
    export_figures(report, policy, out)
    cfg = report.config
    _, test = cfg.scenarios()
    if test.deterministic:
        traj = test.trajectory(0, np.random.default_rng(0))
        write_trajectory(out / "trajectory.csv", traj)
        write_schedule(out / "schedule_theoretical.csv", optimal_deterministic_schedule(traj, cfg.market.q0))
    write_schedule(out / "schedule_twap.csv", twap(cfg.market.q0, cfg.market.N).volumes)


# --- results table recipes ---------------------------------------------------

TABLES = {
    "table2": [("constant", "QT"), ("constant", "QTS")],
    "table4": [("increasing", "QT"), ("increasing", "QTS")],
    "table6": [("decreasing", "QT"), ("decreasing", "QTS")],
    "table8": [("mixed_test_increasing", "QT"), ("mixed_test_increasing", "QTS"),
               ("mixed_test_decreasing", "QT"), ("mixed_test_decreasing", "QTS")],
    "table9": [("stochastic_low", "QT"), ("stochastic_low", "QTS")],
    "table10": [("stochastic_high", "QT"), ("stochastic_high", "QTS")],
}


def reproduce(table: str, seed: int = 0, profile: str = "full", out: Path | None = None,
              base: ExperimentConfig | None = None) -> list[dict]:
    if table not in TABLES:
        raise ValueError(f"unknown table {table!r}; choose from {sorted(TABLES)}")
    rows = []
    for scenario, mode in TABLES[table]:
        sub = None if out is None else Path(out) / f"{scenario}_{mode}"
        if base is None:
            cfg = ExperimentConfig(scenario=scenario, mode=mode, seed=seed, profile=profile, out=sub)
        else:
            cfg = dataclasses.replace(base, scenario=scenario, mode=FeatureMode(mode), seed=seed,
                                      profile=profile, out=sub)
        report, _ = run_experiment(cfg)
        rows.append({"scenario": scenario, "features": mode, **report.summary()})
    if out is not None:
        cols = list(rows[0])
        write_csv(Path(out) / f"{table}.csv", cols, [[r.get(c, "") for c in cols] for r in rows], table)
    return rows
