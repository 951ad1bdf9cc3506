"""Benchmark liquidation schedules and per-step policies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from .market_sim import CIRImpactSpec, ImpactTrajectory, cost_matrix


@dataclass(frozen=True)
class Schedule:
    volumes: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.volumes)
        if v.ndim != 1 or np.any(v < 0):
            raise ValueError("schedule volumes must be a 1-d non-negative sequence")
        v.setflags(write=False)
        object.__setattr__(self, "volumes", v)

    @property
    def total(self):
        return self.volumes.sum()

    @property
    def holdings(self) -> np.ndarray:
        """Inventory before each step plus the final (zero) inventory, length N+1."""
        return self.total - np.concatenate(([0], np.cumsum(self.volumes)))


@dataclass(frozen=True)
class ACRiskParams:
    lambda_ra: float
    sigma: float
    alpha_tilde: float
    tau: float = 1.0

    def __post_init__(self):
        if self.lambda_ra < 0:
            raise ValueError("risk aversion must be non-negative")
        if not (self.sigma > 0 and self.alpha_tilde > 0 and self.tau > 0):
            raise ValueError("sigma, alpha_tilde and tau must be positive")


def round_schedule(volumes, q0: int) -> np.ndarray:
    """Largest-remainder rounding to non-negative integers summing to ``q0``.

    Ties on the fractional part go to the earlier step.
    """
    v = np.clip(np.asarray(volumes, dtype=float), 0.0, None)
    if v.sum() <= 0:
        raise ValueError("cannot round an all-zero schedule")
    v = v * (q0 / v.sum())
    base = np.floor(v + 1e-12).astype(int)
    short = q0 - int(base.sum())
    frac = v - base
    order = sorted(range(len(v)), key=lambda i: (-round(frac[i], 12), i))
    for i in order[:short]:
        base[i] += 1
    return base


def twap(q0: int, N: int) -> Schedule:
    if N < 1:
        raise ValueError("N must be >= 1")
    return Schedule(round_schedule(np.full(N, q0 / N), q0))


def ac_sinh_holdings(q0: float, N: int, risk: ACRiskParams) -> np.ndarray:
    """Almgren-Chriss mean-variance holdings ``q*_t`` for ``t = 0..N``."""
    t = np.arange(N + 1, dtype=float) * risk.tau
    T = N * risk.tau
    rhs = risk.lambda_ra * risk.sigma**2 / (2 * risk.alpha_tilde) * risk.tau**2
    if rhs <= 0:
        return q0 * (N - np.arange(N + 1)) / N

    # 2(cosh(x) - 1) = 4 sinh(x/2)^2, so the root is closed-form and stable for tiny rhs
    rate = 2.0 * math.asinh(math.sqrt(rhs) / 2.0) / risk.tau
    if rate * T > 700:
        # sinh ratio overflows; use the equivalent exponential form
        return q0 * np.exp(-rate * t) * (1 - np.exp(-2 * rate * (T - t))) / (1 - np.exp(-2 * rate * T))
    return q0 * np.sinh(rate * (T - t)) / math.sinh(rate * T)


def _kkt_solve(H: np.ndarray, free: np.ndarray, q0: float) -> tuple[np.ndarray, float]:
    n = int(free.sum())
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = H[np.ix_(free, free)]
    K[:n, n] = 1.0
    K[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = q0
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("singular KKT system; trajectory must have positive impacts") from exc
    v = np.zeros(len(free))
    v[free] = sol[:n]
    # stationarity: H v + mu * 1 = 0 on the free set
    return v, -sol[n]


def _convex_on_plane(H: np.ndarray) -> bool:
    n = len(H)
    if n == 1:
        return True
    basis = np.linalg.svd(np.ones((1, n)))[2][1:].T
    return bool(np.linalg.eigvalsh(basis.T @ H @ basis).min() > 1e-10 * np.abs(H).max())


def _face_enumeration(H: np.ndarray, q0: float) -> np.ndarray:
    """Global minimum of a possibly non-convex QP on the scaled simplex.

    Every face is visited; the minimiser lies in the relative interior of some
    face where the face-restricted problem is convex, or at a vertex.
    """
    n = len(H)
    best, best_v = np.inf, None
    for mask in range(1, 2**n):
        free = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        sub = H[np.ix_(free, free)]
        if free.sum() > 1 and not _convex_on_plane(sub):
            continue
        try:
            v, _ = _kkt_solve(H, free, q0)
        except RuntimeError:
            continue
        if np.any(v[free] < -1e-12):
            continue
        v = np.clip(v, 0.0, None)
        c = 0.5 * v @ H @ v
        if c < best - 1e-15:
            best, best_v = c, v
    return best_v


def optimal_deterministic_schedule(traj: ImpactTrajectory, q0: float, max_iter: int = 100) -> np.ndarray:
    """Minimise expected cost over real schedules with ``sum(v) = q0`` and ``v >= 0``.

    Primal active set: solve the equality-constrained KKT system on the free
    variables, clamp the most negative one to zero, and release bound variables
    whose multiplier turns negative. This is exact when the cost is convex on
    the plane ``sum(v) = q0`` (true for the linear trajectories used here);
    otherwise every face is enumerated, which is affordable for N <= 16.
    """
    H = 2.0 * cost_matrix(traj)
    n = len(traj)
    if not _convex_on_plane(H):
        if n > 16:
            raise ValueError("cost is not convex on the feasible set and N is too large to enumerate faces")
        return _face_enumeration(H, q0)
    free = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        v, mu = _kkt_solve(H, free, q0)
        if np.any(v[free] < -1e-12):
            worst = np.flatnonzero(free)[np.argmin(v[free])]
            free[worst] = False
            continue
        grad = H @ v
        # multiplier of v_i >= 0 at a bound variable: grad_i - mu
        mult = grad - mu
        bound = ~free
        if np.any(bound) and np.min(mult[bound]) < -1e-12:
            idx = np.flatnonzero(bound)[np.argmin(mult[bound])]
            free[idx] = True
            continue
        return np.clip(v, 0.0, None)
    raise RuntimeError("active-set loop did not converge")


def optimal_integer_schedule(traj: ImpactTrajectory, q0: int) -> Schedule:
    return Schedule(round_schedule(optimal_deterministic_schedule(traj, q0), q0))


def barger_lorig_rate(q: float, t: int, N: int, alpha_t: float, kappa_t: float, spec: CIRImpactSpec) -> float:
    """Unclamped trading rate: TWAP perturbed by the impacts' distance from their means."""
    left = N - t
    return (
        1.0 / left
        + spec.lambda_alpha * (spec.theta_alpha - alpha_t) / (2 * alpha_t)
        + left * spec.lambda_kappa * (spec.theta_kappa - kappa_t) / (6 * kappa_t)
    ) * q


def barger_lorig_action(
    q: int, t: int, N: int, alpha_t: float, kappa_t: float, spec: CIRImpactSpec, tau: float = 1.0
) -> int:
    if not 0 <= t < N:
        raise ValueError(f"step {t} outside [0, {N})")
    if t == N - 1:
        return int(q)
    nu = barger_lorig_rate(q, t, N, alpha_t, kappa_t, spec)
    v = int(np.floor(nu * tau + 0.5))
    return min(max(v, 0), int(q))
