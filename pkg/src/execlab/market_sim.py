"""Almgren-Chriss style market with constant, linear and CIR impact coefficients.

Time is zero-based: a trajectory of length ``N`` holds the impacts that apply to
the trades at steps ``t = 0, ..., N-1``. The step length is fixed to one, so the
temporary impact ``alpha`` is quoted directly per share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

CIR_FLOOR = 1e-8


@dataclass(frozen=True)
class MarketParams:
    S0: float = 10.0
    sigma: float = 1e-5
    q0: int = 20
    N: int = 10
    tau: float = 1.0

    def __post_init__(self):
        if not self.S0 > 0:
            raise ValueError(f"S0 must be positive, got {self.S0}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if int(self.q0) != self.q0 or self.q0 < 1:
            raise ValueError(f"q0 must be a positive integer, got {self.q0}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def T(self) -> float:
        return self.N * self.tau


@dataclass(frozen=True)
class LinearImpactSpec:
    kappa0: float
    beta_kappa: float
    alpha0: float
    beta_alpha: float


@dataclass(frozen=True)
class CIRImpactSpec:
    lambda_kappa: float
    lambda_alpha: float
    theta_kappa: float
    theta_alpha: float
    sigma_kappa: float
    sigma_alpha: float
    omega: float

    def __post_init__(self):
        for name in ("lambda_kappa", "lambda_alpha", "theta_kappa", "theta_alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("sigma_kappa", "sigma_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if abs(self.omega) > 1:
            raise ValueError(f"correlation omega must lie in [-1, 1], got {self.omega}")
        if not self.feller_kappa or not self.feller_alpha:
            raise ValueError(
                "Feller condition 2*lambda*theta >= sigma^2 violated "
                f"(kappa: {self.feller_kappa}, alpha: {self.feller_alpha})"
            )

    @property
    def feller_kappa(self) -> bool:
        return 2 * self.lambda_kappa * self.theta_kappa >= self.sigma_kappa**2

    @property
    def feller_alpha(self) -> bool:
        return 2 * self.lambda_alpha * self.theta_alpha >= self.sigma_alpha**2


@dataclass(frozen=True)
class ImpactTrajectory:
    """Per-step permanent (kappa) and temporary (alpha) impact coefficients."""

    kappa: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float)
        if kappa.ndim != 1 or kappa.shape != alpha.shape or len(kappa) == 0:
            raise ValueError("kappa and alpha must be 1-d sequences of equal length")
        if not (np.all(kappa > 0) and np.all(alpha > 0)):
            raise ValueError("impact coefficients must be strictly positive")
        kappa.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "alpha", alpha)

    def __len__(self) -> int:
        return len(self.kappa)


@dataclass(frozen=True)
class EpisodeState:
    t: int
    q: int
    S: float
    cash: float = 0.0


@dataclass(frozen=True)
class Fill:
    step: int
    volume: int
    exec_price: float
    mid_before: float


def constant_trajectory(kappa: float, alpha: float, N: int) -> ImpactTrajectory:
    if not (kappa > 0 and alpha > 0):
        raise ValueError(f"impacts must be positive, got kappa={kappa}, alpha={alpha}")
    return ImpactTrajectory(np.full(N, float(kappa)), np.full(N, float(alpha)))


def linear_trajectory(spec: LinearImpactSpec, N: int) -> ImpactTrajectory:
    t = np.arange(N, dtype=float)
    kappa = spec.kappa0 + spec.beta_kappa * t
    alpha = spec.alpha0 + spec.beta_alpha * t
    if np.any(kappa <= 0) or np.any(alpha <= 0):
        raise ValueError(f"linear impact spec {spec} yields non-positive impacts over {N} steps")
    return ImpactTrajectory(kappa, alpha)


def correlated_normals(omega: float, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two standard-normal sequences with correlation ``omega``: z2 = omega*z1 + sqrt(1-omega^2)*z."""
    z = rng.standard_normal((2, n))
    return z[0], omega * z[0] + math.sqrt(1.0 - omega**2) * z[1]


def cir_trajectory(
    spec: CIRImpactSpec,
    N: int,
    rng: np.random.Generator,
    substeps: int = 10,
    tau: float = 1.0,
) -> ImpactTrajectory:
    """Correlated CIR paths for kappa and alpha, started at their long-run means.

    Full-truncation Euler with ``substeps`` sub-intervals per trading step. The
    value recorded for step ``t`` is the process level at time ``t * tau``, so
    the first entry is the long-run mean itself.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    dt = tau / substeps
    sq = math.sqrt(dt)
    dB1, dB2 = correlated_normals(spec.omega, (N - 1) * substeps, rng)

    kappa = np.empty(N)
    alpha = np.empty(N)
    k, a = spec.theta_kappa, spec.theta_alpha
    kappa[0], alpha[0] = k, a
    i = 0
    for t in range(1, N):
        for _ in range(substeps):
            kp, ap = max(k, 0.0), max(a, 0.0)
            k = k + spec.lambda_kappa * (spec.theta_kappa - kp) * dt + spec.sigma_kappa * math.sqrt(kp) * sq * dB1[i]
            a = a + spec.lambda_alpha * (spec.theta_alpha - ap) * dt + spec.sigma_alpha * math.sqrt(ap) * sq * dB2[i]
            i += 1
        kappa[t], alpha[t] = k, a
    return ImpactTrajectory(np.maximum(kappa, CIR_FLOOR), np.maximum(alpha, CIR_FLOOR))


def step_market(
    state: EpisodeState,
    v: int,
    traj: ImpactTrajectory,
    params: MarketParams,
    rng: np.random.Generator,
) -> tuple[EpisodeState, Fill, float]:
    """Sell ``v`` shares at step ``state.t``; return the next state, the fill and the reward.

    Exactly one standard normal is drawn per call, traded or not, so that
    strategies sharing an episode seed see identical price noise.
    """
    if v < 0 or v > state.q:
        raise ValueError(f"volume {v} outside [0, {state.q}] at step {state.t}")
    if state.t >= len(traj):
        raise ValueError(f"step {state.t} beyond trajectory length {len(traj)}")
    kappa = traj.kappa[state.t]
    alpha = traj.alpha[state.t]
    xi = rng.standard_normal()
    exec_price = state.S - alpha * v
    reward = exec_price * v
    S_next = state.S - kappa * v + params.sigma * math.sqrt(params.tau) * xi
    fill = Fill(step=state.t, volume=int(v), exec_price=exec_price, mid_before=state.S)
    nxt = EpisodeState(t=state.t + 1, q=state.q - int(v), S=S_next, cash=state.cash + reward)
    return nxt, fill, reward


def implementation_shortfall(S0: float, q0: int, fills: Sequence[Fill]) -> float:
    sold = sum(f.volume for f in fills)
    if sold != q0:
        raise ValueError(f"incomplete liquidation: sold {sold} of {q0}")
    return S0 * q0 - sum(f.exec_price * f.volume for f in fills)


def expected_cost(v: Sequence[float], traj: ImpactTrajectory, q0: float | None = None) -> float:
    """Expected implementation shortfall of a fixed schedule (the noise term has zero mean)."""
    v = np.asarray(v, dtype=float)
    if v.shape != traj.kappa.shape:
        raise ValueError(f"schedule length {len(v)} != trajectory length {len(traj)}")
    if np.any(v < 0):
        raise ValueError("schedule has negative volumes")
    if q0 is not None and not math.isclose(v.sum(), q0, rel_tol=0, abs_tol=1e-9 * max(1.0, q0)):
        raise ValueError(f"schedule sums to {v.sum()}, expected {q0}")
    sold_before = np.concatenate(([0.0], np.cumsum(traj.kappa * v)[:-1]))
    return float(np.sum(traj.alpha * v**2) + np.sum(v * sold_before))


def cost_matrix(traj: ImpactTrajectory) -> np.ndarray:
    """Symmetric ``P`` with ``expected_cost(v) == v @ P @ v``."""
    n = len(traj)
    lower = np.tril(np.broadcast_to(traj.kappa, (n, n)), k=-1)
    return np.diag(traj.alpha) + 0.5 * (lower + lower.T)


@dataclass
class EpisodeResult:
    fills: list[Fill]
    rewards: list[float]
    mids: list[float]
    state: EpisodeState

    @property
    def volumes(self) -> np.ndarray:
        return np.array([f.volume for f in self.fills], dtype=int)

    @property
    def cash(self) -> float:
        return self.state.cash


def run_episode(
    policy: Callable[[EpisodeState, ImpactTrajectory], int],
    traj: ImpactTrajectory,
    params: MarketParams,
    rng: np.random.Generator,
) -> EpisodeResult:
    """Simulate one liquidation where ``policy(state, traj)`` returns the volume to sell."""
    state = EpisodeState(t=0, q=params.q0, S=params.S0)
    fills, rewards, mids = [], [], [params.S0]
    for _ in range(params.N):
        v = int(policy(state, traj))
        state, fill, r = step_market(state, v, traj, params, rng)
        fills.append(fill)
        rewards.append(r)
        mids.append(state.S)
    return EpisodeResult(fills, rewards, mids, state)


def schedule_policy(volumes: Sequence[int]) -> Callable[[EpisodeState, ImpactTrajectory], int]:
    vols = [int(x) for x in volumes]

    def act(state: EpisodeState, traj: ImpactTrajectory) -> int:
        return vols[state.t]

    return act


# --- scenarios -------------------------------------------------------------

NOISE_STREAM = 0
IMPACT_STREAM = 1


def episode_rngs(seed: int, index: int, phase: int = 0) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (impact, noise) generators for one episode, fixed by ``(seed, phase, index)``."""
    impact = np.random.default_rng([seed, phase, index, IMPACT_STREAM])
    noise = np.random.default_rng([seed, phase, index, NOISE_STREAM])
    return impact, noise


@dataclass(frozen=True)
class Scenario:
    """A named generator of impact trajectories.

    ``kind`` is one of ``constant``, ``linear``, ``cir`` or ``mixed``; ``mixed``
    alternates between its ``parts`` episode by episode.
    """

    name: str
    kind: str
    params: MarketParams = field(default_factory=MarketParams)
    constant: tuple[float, float] | None = None
    linear: LinearImpactSpec | None = None
    cir: CIRImpactSpec | None = None
    parts: tuple["Scenario", ...] = ()
    substeps: int = 10

    def __post_init__(self):
        if self.kind == "constant":
            if self.constant is None:
                raise ValueError("constant scenario needs (kappa, alpha)")
            constant_trajectory(*self.constant, self.params.N)
        elif self.kind == "linear":
            if self.linear is None:
                raise ValueError("linear scenario needs a LinearImpactSpec")
            linear_trajectory(self.linear, self.params.N)
        elif self.kind == "cir":
            if self.cir is None:
                raise ValueError("cir scenario needs a CIRImpactSpec")
        elif self.kind == "mixed":
            if not self.parts:
                raise ValueError("mixed scenario needs at least one part")
        else:
            raise ValueError(f"unknown scenario kind {self.kind!r}")

    @property
    def deterministic(self) -> bool:
        if self.kind == "mixed":
            return all(p.deterministic for p in self.parts)
        return self.kind != "cir"

    def trajectory(self, index: int, rng: np.random.Generator) -> ImpactTrajectory:
        N = self.params.N
        if self.kind == "constant":
            return constant_trajectory(*self.constant, N)
        if self.kind == "linear":
            return linear_trajectory(self.linear, N)
        if self.kind == "cir":
            return cir_trajectory(self.cir, N, rng, substeps=self.substeps, tau=self.params.tau)
        return self.parts[index % len(self.parts)].trajectory(index // len(self.parts), rng)

    def episode(self, seed: int, index: int, phase: int = 0) -> tuple[ImpactTrajectory, np.random.Generator]:
        """Impact path and price-noise generator for episode ``index``."""
        impact_rng, noise_rng = episode_rngs(seed, index, phase)
        return self.trajectory(index, impact_rng), noise_rng

    def with_params(self, **changes) -> "Scenario":
        params = replace(self.params, **changes)
        parts = tuple(p.with_params(**changes) for p in self.parts)
        return replace(self, params=params, parts=parts)
