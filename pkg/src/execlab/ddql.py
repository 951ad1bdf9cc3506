"""Double Deep Q-Learning liquidation agent.

The Q-network scores a (state, action) pair: its input is the normalised state
features with the candidate sell volume appended, and the greedy action is found
by enumerating every feasible volume ``0..q``.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .market_sim import EpisodeState, MarketParams, Scenario, step_market
from .neural import (
    AdamState,
    NetConfig,
    QNetwork,
    copy_weights,
    forward,
    init_network,
    network_from_bytes,
    network_to_bytes,
    train_batch,
)

log = logging.getLogger(__name__)

TRAIN_PHASE = 0
TEST_PHASE = 1
AGENT_STREAM = 2


class FeatureMode(enum.Enum):
    QT = "QT"
    QTS = "QTS"

    @property
    def state_dim(self) -> int:
        return 2 if self is FeatureMode.QT else 3

    @property
    def input_dim(self) -> int:
        return self.state_dim + 1


@dataclass
class PriceBounds:
    """Running min/max of observed mid-prices used for min-max normalisation."""

    lo: float = math.inf
    hi: float = -math.inf

    def update(self, S: float) -> None:
        if S < self.lo:
            self.lo = S
        if S > self.hi:
            self.hi = S

    def normalize(self, S: float) -> float:
        if not self.hi > self.lo:
            return 0.0
        x = 2.0 * (S - self.lo) / (self.hi - self.lo) - 1.0
        return min(1.0, max(-1.0, x))

    def copy(self) -> "PriceBounds":
        return PriceBounds(self.lo, self.hi)


def state_features(q: int, t: int, S: float | None, q0: int, N: int, bounds: PriceBounds | None) -> np.ndarray:
    qn = 2.0 * q / q0 - 1.0
    tn = 2.0 * t / (N - 1) - 1.0 if N > 1 else 0.0
    if S is None:
        return np.array([qn, tn])
    return np.array([qn, tn, bounds.normalize(S) if bounds is not None else 0.0])


def normalize_features(
    q: int, t: int, S: float | None, v: int, q0: int, N: int, bounds: PriceBounds | None = None
) -> np.ndarray:
    """Network input for (state, action); pass ``S=None`` for the (q, t) feature set."""
    return np.append(state_features(q, t, S, q0, N, bounds), 2.0 * v / q0 - 1.0)


def greedy_actions(net: QNetwork, states: np.ndarray, q, t, q0: int, N: int) -> np.ndarray:
    """Argmax volume per row over ``0..q``; smallest volume wins ties, and the last step sells everything."""
    states = np.atleast_2d(states)
    q = np.asarray(q, dtype=int).reshape(-1)
    t = np.broadcast_to(np.asarray(t, dtype=int), q.shape)
    out = np.where(t >= N - 1, q, 0)
    need = np.flatnonzero((t < N - 1) & (q > 0))
    if len(need) == 0:
        return out
    # one row per feasible (state, volume) pair, segments laid out back to back
    counts = q[need] + 1
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    owner = np.repeat(np.arange(len(need)), counts)
    vols = np.arange(counts.sum()) - starts[owner]
    x = np.empty((len(vols), states.shape[1] + 1))
    x[:, :-1] = states[need][owner]
    x[:, -1] = 2.0 * vols / q0 - 1.0
    values = forward(net, x)
    best = np.maximum.reduceat(values, starts)
    hits = np.flatnonzero(values == best[owner])
    first = np.unique(owner[hits], return_index=True)[1]
    out[need] = vols[hits[first]]
    return out


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    next_q: int
    next_t: int
    terminal: bool


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_q: np.ndarray
    next_t: np.ndarray
    terminal: np.ndarray

    @classmethod
    def from_transitions(cls, items: list[Transition]) -> "TransitionBatch":
        return cls(
            np.array([x.state for x in items], dtype=float),
            np.array([x.action for x in items], dtype=int),
            np.array([x.reward for x in items], dtype=float),
            np.array([x.next_state for x in items], dtype=float),
            np.array([x.next_q for x in items], dtype=int),
            np.array([x.next_t for x in items], dtype=int),
            np.array([x.terminal for x in items], dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.actions)


class ReplayMemory:
    """Fixed-capacity transition store; when full, the oldest half is dropped."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 2:
            raise ValueError("capacity must be >= 2")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.next_q = np.zeros(capacity, dtype=int)
        self.next_t = np.zeros(capacity, dtype=int)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.evictions = 0

    def __len__(self) -> int:
        return self.size

    def _arrays(self):
        return (self.states, self.actions, self.rewards, self.next_states, self.next_q, self.next_t, self.terminal)

    def append(self, tr: Transition) -> None:
        i = self.size
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.next_states[i] = tr.next_state
        self.next_q[i] = tr.next_q
        self.next_t[i] = tr.next_t
        self.terminal[i] = tr.terminal
        self.size += 1
        if self.size == self.capacity:
            keep = self.capacity // 2
            for arr in self._arrays():
                arr[:keep] = arr[self.size - keep:self.size].copy()
            self.size = keep
            self.evictions += 1

    def sample(self, b: int, rng: np.random.Generator) -> TransitionBatch:
        idx = rng.integers(0, self.size, size=b)
        return TransitionBatch(*(arr[idx] for arr in self._arrays()))

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                       self.next_states[i].copy(), int(self.next_q[i]), int(self.next_t[i]), bool(self.terminal[i]))
            for i in range(self.size)
        ]


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 10_000
    test_episodes: int = 5_000
    batch_size: int = 32
    reset_every: int = 100
    decay: float = 0.995
    gamma: float = 1.0
    lr: float = 1e-4
    memory: int = 15_000
    mode: FeatureMode = FeatureMode.QT
    seed: int = 0
    hidden_layers: int = 5
    hidden_width: int = 30
    leaky_slope: float = 0.01
    # Learning rewards are sale proceeds net of the arrival value S0*v, in basis
    # points of the initial position. For a full liquidation this only shifts
    # Q(s, .) by a per-state constant, so greedy actions are unchanged.
    reward_baseline: bool = True

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size > self.memory:
            raise ValueError("batch size cannot exceed memory length")
        if self.episodes < 0 or self.test_episodes < 0:
            raise ValueError("episode counts must be non-negative")

    def net_config(self) -> NetConfig:
        return NetConfig(self.mode.input_dim, self.hidden_layers, self.hidden_width, self.leaky_slope, 1)


def learning_reward(reward: float, v: int, params: MarketParams, baseline: bool = True) -> float:
    if not baseline:
        return reward
    return 1e4 * (reward - params.S0 * v) / (params.S0 * params.q0)


@dataclass
class Policy:
    net: QNetwork
    mode: FeatureMode
    q0: int
    N: int
    bounds: PriceBounds = field(default_factory=PriceBounds)

    def features(self, q: int, t: int, S: float) -> np.ndarray:
        price = S if self.mode is FeatureMode.QTS else None
        return state_features(q, t, price, self.q0, self.N, self.bounds)

    def act(self, state: EpisodeState) -> int:
        if state.t >= self.N - 1:
            return state.q
        if state.q == 0:
            return 0
        return int(greedy_actions(self.net, self.features(state.q, state.t, state.S), [state.q], [state.t], self.q0, self.N)[0])

    def __call__(self, state: EpisodeState, traj=None) -> int:
        return self.act(state)


def select_action(
    state: EpisodeState,
    epsilon: float,
    policy: Policy,
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy with binomial exploration centred on the TWAP rate."""
    N = policy.N
    if state.t >= N - 1:
        return state.q
    if state.q == 0:
        return 0
    if rng.random() <= epsilon:
        return int(rng.binomial(state.q, 1.0 / (N - state.t)))
    return policy.act(state)


def compute_targets(batch: TransitionBatch, gamma: float, main: QNetwork, tgt: QNetwork, q0: int, N: int) -> np.ndarray:
    """Double-Q targets: the main net picks the next action, the target net values it."""
    y = batch.rewards.astype(float).copy()
    live = ~batch.terminal
    if gamma == 0 or not np.any(live):
        return y
    s2 = batch.next_states[live]
    q2 = batch.next_q[live]
    v_star = greedy_actions(main, s2, q2, batch.next_t[live], q0, N)
    x = np.column_stack([s2, 2.0 * v_star / q0 - 1.0])
    y[live] += gamma * forward(tgt, x)
    return y


@dataclass
class TrainingLog:
    episode_is: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)
    resets: int = 0
    seconds: float = 0.0


class TrainingAborted(RuntimeError):
    def __init__(self, episode: int, cause: Exception):
        super().__init__(f"training aborted in episode {episode}: {cause}")
        self.episode = episode


def train(config: TrainConfig, scenario: Scenario, progress_every: int = 0) -> tuple[Policy, TrainingLog]:
    """Train a DDQL agent on ``config.episodes`` episodes drawn from ``scenario``."""
    params = scenario.params
    q0, N = params.q0, params.N
    use_price = config.mode is FeatureMode.QTS
    rng = np.random.default_rng([config.seed, AGENT_STREAM])
    main = init_network(config.net_config(), rng)
    tgt = main.clone()
    adam = AdamState.for_network(main, lr=config.lr)
    bounds = PriceBounds()
    policy = Policy(main, config.mode, q0, N, bounds)
    memory = ReplayMemory(config.memory, config.mode.state_dim)
    epsilon = 1.0
    actions = 0
    tlog = TrainingLog()
    start = time.perf_counter()

    for ep in range(config.episodes):
        traj, noise = scenario.episode(config.seed, ep, TRAIN_PHASE)
        state = EpisodeState(t=0, q=q0, S=params.S0)
        bounds.update(state.S)
        s_feat = state_features(state.q, state.t, state.S if use_price else None, q0, N, bounds)
        losses = []
        try:
            for _ in range(N):
                v = select_action(state, epsilon, policy, rng)
                nxt, _, reward = step_market(state, v, traj, params, noise)
                bounds.update(nxt.S)
                terminal = nxt.t >= N
                n_feat = state_features(nxt.q, min(nxt.t, N - 1), nxt.S if use_price else None, q0, N, bounds)
                if terminal:
                    n_feat = np.zeros_like(n_feat)
                memory.append(Transition(s_feat, v, learning_reward(reward, v, params, config.reward_baseline),
                                         n_feat, nxt.q, nxt.t, terminal))
                if len(memory) >= config.batch_size:
                    batch = memory.sample(config.batch_size, rng)
                    y = compute_targets(batch, config.gamma, main, tgt, q0, N)
                    x = np.column_stack([batch.states, 2.0 * batch.actions / q0 - 1.0])
                    losses.append(train_batch(main, adam, x, y))
                actions += 1
                if actions % config.reset_every == 0:
                    epsilon *= config.decay
                    copy_weights(main, tgt)
                    tlog.resets += 1
                state, s_feat = nxt, n_feat
        except FloatingPointError as exc:
            raise TrainingAborted(ep, exc) from exc
        tlog.episode_is.append(params.S0 * q0 - state.cash)
        tlog.epsilon.append(epsilon)
        tlog.mean_loss.append(float(np.mean(losses)) if losses else math.nan)
        if progress_every and (ep + 1) % progress_every == 0:
            recent = tlog.episode_is[-progress_every:]
            log.info("episode %d eps=%.4f IS=%.4f loss=%.3g", ep + 1, epsilon, np.mean(recent), tlog.mean_loss[-1])

    tlog.seconds = time.perf_counter() - start
    return Policy(main, config.mode, q0, N, bounds.copy()), tlog


@dataclass
class EvalResult:
    shortfall: np.ndarray
    cash: np.ndarray
    volumes: np.ndarray
    norm_price: np.ndarray

    @property
    def holdings(self) -> np.ndarray:
        """Inventory before each step and at the end, shape (B, N+1)."""
        if len(self.volumes) == 0:
            return np.zeros((0, 0))
        q0 = self.volumes[0].sum()
        return q0 - np.concatenate([np.zeros((len(self.volumes), 1), dtype=int), np.cumsum(self.volumes, axis=1)], axis=1)


def iter_episodes(act, scenario: Scenario, episodes: int, seed: int, phase: int = TEST_PHASE,
                  bounds: PriceBounds | None = None) -> Iterator[tuple[float, np.ndarray, np.ndarray]]:
    params = scenario.params
    for i in range(episodes):
        traj, noise = scenario.episode(seed, i, phase)
        state = EpisodeState(t=0, q=params.q0, S=params.S0)
        vols = np.zeros(params.N, dtype=int)
        sbar = np.zeros(params.N)
        for t in range(params.N):
            v = int(act(state, traj))
            if bounds is not None:
                sbar[t] = bounds.normalize(state.S)
            vols[t] = v
            state, _, _ = step_market(state, v, traj, params, noise)
        if state.q != 0:
            raise RuntimeError(f"episode {i} ended with {state.q} shares unsold")
        yield state.cash, vols, sbar


def run_strategy(act, scenario: Scenario, episodes: int, seed: int, bounds: PriceBounds | None = None) -> EvalResult:
    """Simulate ``act(state, traj)`` on the test episodes of ``scenario`` keyed by ``seed``."""
    params = scenario.params
    cash = np.zeros(episodes)
    vols = np.zeros((episodes, params.N), dtype=int)
    sbar = np.zeros((episodes, params.N))
    for i, (c, v, s) in enumerate(iter_episodes(act, scenario, episodes, seed, bounds=bounds)):
        cash[i], vols[i], sbar[i] = c, v, s
    return EvalResult(params.S0 * params.q0 - cash, cash, vols, sbar)


def evaluate(policy: Policy, episodes: int, scenario: Scenario, seed: int) -> EvalResult:
    """Greedy test episodes with frozen price bounds."""
    return run_strategy(lambda s, traj: policy.act(s), scenario, episodes, seed, bounds=policy.bounds)


def policy_heatmap(policy: Policy, price_levels=(-1.0, -0.5, 0.0, 0.5, 1.0)) -> list[tuple]:
    """Greedy action on the (q, t) lattice, or (q, t, normalised price) in QTS mode.

    Rows are ``(t, q, action)`` or ``(t, q, price_level, action)``.
    """
    q0, N = policy.q0, policy.N
    levels = list(price_levels) if policy.mode is FeatureMode.QTS else [None]
    rows = []
    for t in range(N):
        for level in levels:
            qs = np.arange(q0 + 1)
            tn = 2.0 * t / (N - 1) - 1.0 if N > 1 else 0.0
            cols = [2.0 * qs / q0 - 1.0, np.full(q0 + 1, tn)]
            if level is not None:
                cols.append(np.full(q0 + 1, float(level)))
            acts = greedy_actions(policy.net, np.column_stack(cols), qs, np.full(q0 + 1, t), q0, N)
            for q, a in zip(qs, acts):
                rows.append((t, int(q), int(a)) if level is None else (t, int(q), float(level), int(a)))
    return rows


# --- policy checkpoints ----------------------------------------------------
#
#   8s   magic "EXPOLCY1"
#   u8   feature mode (0 = QT, 1 = QTS)
#   u32  q0, N
#   f64  price_min, price_max (inf/-inf when never updated)
#   ...  network checkpoint (see neural)

POLICY_MAGIC = b"EXPOLCY1"
_POLICY_HEADER = struct.Struct("<8sBIIdd")


def policy_to_bytes(policy: Policy) -> bytes:
    mode = 0 if policy.mode is FeatureMode.QT else 1
    head = _POLICY_HEADER.pack(POLICY_MAGIC, mode, policy.q0, policy.N, policy.bounds.lo, policy.bounds.hi)
    return head + network_to_bytes(policy.net)


def policy_from_bytes(blob: bytes) -> Policy:
    magic, mode, q0, N, lo, hi = _POLICY_HEADER.unpack_from(blob, 0)
    if magic != POLICY_MAGIC:
        raise ValueError(f"bad policy magic {magic!r}")
    net, _ = network_from_bytes(blob[_POLICY_HEADER.size:])
    fm = FeatureMode.QT if mode == 0 else FeatureMode.QTS
    if net.config.input_dim != fm.input_dim:
        raise ValueError("network input size does not match feature mode")
    return Policy(net, fm, q0, N, PriceBounds(lo, hi))


def save_policy(policy: Policy, path) -> None:
    path = Path(path)
    path.write_bytes(policy_to_bytes(policy))
    meta = {
        "format": POLICY_MAGIC.decode(),
        "mode": policy.mode.value,
        "q0": policy.q0,
        "N": policy.N,
        "price_min": policy.bounds.lo,
        "price_max": policy.bounds.hi,
        "net": {"n_params": policy.net.config.n_params, **policy.net.config.__dict__},
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_policy(path) -> Policy:
    return policy_from_bytes(Path(path).read_bytes())
