"""Exact simulation of the N-particle velocity-jump process.

Pairs (k, j) fire at rate psi(r_k - r_j) sigma(v_k - v_j) / N; on a firing,
v_k is replaced by v_j + u with u drawn from the noise law. Between firings
positions move by free transport. Simulation uses thinning against a rate
majorant, so trajectories are exact in law: positions are piecewise linear,
velocities piecewise constant, and there is no time step.

Indices are 0-based in the Python API and 1-based in exported CSV files.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Mapping, Optional

import numpy as np

from .kernels import KernelSet, SigmaKernel, bracket

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


class NonFiniteStateError(ArithmeticError):
    """A simulation produced NaN or infinite coordinates."""


def derive_seed(master_seed: int, index: int) -> int:
    """Seed of replica ``index``: output number ``index + 1`` of SplitMix64
    started from ``master_seed``.

    The mix is fixed so replica streams are portable across implementations.
    """
    if not 0 <= master_seed <= MASK64:
        raise ValueError("master seed must be a 64-bit unsigned integer")
    z = (master_seed + (index + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass
class ParticleState:
    t: float
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float, ndmin=2)
        self.velocities = np.array(self.velocities, dtype=float, ndmin=2)
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have the same (N, d) shape")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise NonFiniteStateError(f"non-finite particle state at t={self.t}")

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def copy(self) -> "ParticleState":
        return ParticleState(self.t, self.positions.copy(), self.velocities.copy())


@dataclass(frozen=True)
class SimConfig:
    t_end: float
    output_times: tuple
    seed: int = 0
    truncation_m: Optional[float] = None
    record_jump_log: bool = False
    exclude_diagonal: bool = False
    # "global": state-independent majorant N psi_max sigma_bound.
    # "velocity": majorant psi_max g_m sum_kj sigma(v_k - v_j) / N, refreshed
    # after every accepted jump (velocities are frozen in between).
    majorant: str = "global"

    def __post_init__(self):
        times = tuple(float(t) for t in self.output_times)
        object.__setattr__(self, "output_times", times)
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("output_times must be sorted")
        if times and (times[0] < 0 or times[-1] > self.t_end):
            raise ValueError("output_times must lie in [0, t_end]")
        if self.truncation_m is not None and not self.truncation_m > 0:
            raise ValueError("truncation_m must be positive")
        if self.majorant not in ("global", "velocity"):
            raise ValueError("majorant must be 'global' or 'velocity'")


@dataclass(frozen=True)
class JumpEvent:
    t: float
    k: int
    j: int
    u: np.ndarray
    accepted: bool
    rate_ratio: float


@dataclass
class Trajectory:
    states: list
    jump_log: Optional[list] = None
    truncation_frozen: bool = False
    proposals: int = 0
    accepted: int = 0
    truncation_m: Optional[float] = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])


def cutoff(x):
    """Smooth g with 1 on [0, 1], 0 on [2, inf) and values in between."""
    x = float(x)
    if x <= 1.0:
        return 1.0
    if x >= 2.0:
        return 0.0
    a = math.exp(-1.0 / (2.0 - x))
    b = math.exp(-1.0 / (x - 1.0))
    return a / (a + b)


def truncation_factor(velocities: np.ndarray, m: Optional[float]) -> float:
    """g_m(v) = g(sum_k |v_k|^2 / m^2); 1 when no truncation is set."""
    if m is None:
        return 1.0
    return cutoff(float(np.sum(velocities * velocities)) / (m * m))


def sigma_bound(sigma: SigmaKernel, truncation_m: Optional[float]) -> float:
    """Bound on sigma over velocity differences reachable under g_m.

    Where g_m > 0 we have sum |v_k|^2 <= 2 m^2, hence |v_k - v_j| <= 2 sqrt(2) m.
    """
    if sigma.is_constant:
        return sigma.growth_constant
    if truncation_m is None:
        raise ValueError("sigma with gamma > 0 needs a truncation_m")
    return sigma.bound(8.0 * truncation_m**2)


def majorant_rate(ks: KernelSet, state: ParticleState, truncation_m: Optional[float] = None,
                  *, exclude_diagonal: bool = False) -> float:
    """Global thinning rate dominating the total jump intensity for all times."""
    pairs_per_row = state.N - 1 if exclude_diagonal else state.N
    return pairs_per_row * ks.psi.psi_max * sigma_bound(ks.sigma, truncation_m)


def apply_jump(state: ParticleState, k: int, j: int, u) -> ParticleState:
    """Return a copy of ``state`` with v_k replaced by v_j + u."""
    out = state.copy()
    out.velocities[k] = state.velocities[j] + np.asarray(u, dtype=float)
    if not np.all(np.isfinite(out.velocities[k])):
        raise NonFiniteStateError(f"non-finite velocity after jump at t={state.t}")
    return out


class _EventLoop:
    """Thinning event loop with lazily transported positions.

    Particle k sits at ``anchor_r[k] + (t - anchor_t[k]) v[k]``; only the
    particles involved in a proposal are ever transported.
    """

    def __init__(self, ks: KernelSet, state: ParticleState, truncation_m, exclude_diagonal,
                 majorant, rng):
        if ks.d != state.d:
            raise ValueError(f"kernel dimension {ks.d} does not match state dimension {state.d}")
        self.ks = ks
        self.rng = rng
        self.N = state.N
        self.t = float(state.t)
        self.anchor_r = state.positions.copy()
        self.anchor_t = np.full(self.N, self.t)
        self.v = state.velocities.copy()
        self.m = truncation_m
        self.exclude_diagonal = exclude_diagonal and self.N > 1
        self.mode = majorant
        self.psi_max = ks.psi.psi_max
        self.sigma_const = ks.sigma.is_constant
        self.g = truncation_factor(self.v, self.m)
        if self.mode == "global" or self.sigma_const:
            self.mode = "global"
            self.sigma_bar = sigma_bound(ks.sigma, truncation_m)
            self.rate = self.psi_max * self.sigma_bar * (self.N - 1 if self.exclude_diagonal else self.N)
        else:
            self._refresh_sigma_matrix()
        self.frozen = self.g == 0.0 and self.N > 0

    def _refresh_sigma_matrix(self):
        S = self.ks.sigma(self.v[:, None, :] - self.v[None, :, :])
        if self.exclude_diagonal:
            np.fill_diagonal(S, 0.0)
        self.S = S
        self.row_cum = np.cumsum(S.sum(axis=1))
        self.rate = self.psi_max * self.g * self.row_cum[-1] / self.N

    def position(self, k: int) -> np.ndarray:
        return self.anchor_r[k] + (self.t - self.anchor_t[k]) * self.v[k]

    def snapshot(self, t: float) -> ParticleState:
        r = self.anchor_r + (t - self.anchor_t)[:, None] * self.v
        return ParticleState(t, r, self.v.copy())

    def next_time(self) -> float:
        if self.frozen or self.rate <= 0.0:
            return math.inf
        return self.t + self.rng.exponential(1.0 / self.rate)

    def _pick_pair(self):
        rng = self.rng
        if self.mode == "global":
            k = int(rng.integers(self.N))
            if self.exclude_diagonal:
                j = int(rng.integers(self.N - 1))
                j += j >= k
            else:
                j = int(rng.integers(self.N))
            return k, j
        x = rng.random() * self.row_cum[-1]
        k = int(np.searchsorted(self.row_cum, x, side="right"))
        row_cum = np.cumsum(self.S[k])
        j = int(np.searchsorted(row_cum, rng.random() * row_cum[-1], side="right"))
        return min(k, self.N - 1), min(j, self.N - 1)

    def propose(self, t: float) -> JumpEvent:
        """Advance the clock to ``t`` and resolve one proposal there."""
        self.t = t
        k, j = self._pick_pair()
        u = self.ks.noise.sample(self.rng)
        psi = float(self.ks.psi(self.position(k) - self.position(j)))
        if self.mode == "global":
            sig = float(self.ks.sigma(self.v[k] - self.v[j]))
            ratio = psi * sig * self.g / (self.psi_max * self.sigma_bar)
        else:
            ratio = psi / self.psi_max
        if not 0.0 <= ratio <= 1.0 + 1e-12:
            raise AssertionError(f"thinning ratio {ratio} outside [0, 1]; majorant is invalid")
        accepted = bool(self.rng.random() < ratio)
        if accepted:
            self.anchor_r[k] = self.position(k)
            self.anchor_t[k] = t
            self.v[k] = self.v[j] + u
            if not np.all(np.isfinite(self.v[k])):
                raise NonFiniteStateError(f"non-finite velocity after jump at t={t}")
            if self.m is not None:
                self.g = truncation_factor(self.v, self.m)
                self.frozen = self.g == 0.0
            if self.mode == "velocity":
                self._refresh_sigma_matrix()
        return JumpEvent(t, k, j, u, accepted, min(ratio, 1.0))


def step_to_next_event(ks: KernelSet, state: ParticleState, truncation_m: Optional[float],
                       rng: np.random.Generator, *, exclude_diagonal: bool = False,
                       majorant: str = "global"):
    """Draw the next proposal and resolve it.

    Returns ``(new_state, event)``. When the g_m cutoff (or a zero kernel)
    leaves no jump intensity, returns ``(state, None)``: the caller should
    continue with pure transport.
    """
    loop = _EventLoop(ks, state, truncation_m, exclude_diagonal, majorant, rng)
    t_next = loop.next_time()
    if math.isinf(t_next):
        return state, None
    event = loop.propose(t_next)
    return loop.snapshot(t_next), event


def _run(ks: KernelSet, state0: ParticleState, cfg: SimConfig, rng: np.random.Generator) -> Trajectory:
    loop = _EventLoop(ks, state0, cfg.truncation_m, cfg.exclude_diagonal, cfg.majorant, rng)
    outs = [t for t in cfg.output_times if t >= state0.t]
    states = []
    log_ = [] if cfg.record_jump_log else None
    proposals = accepted = 0
    i = 0
    while True:
        t_next = loop.next_time()
        while i < len(outs) and outs[i] < t_next:
            states.append(loop.snapshot(outs[i]))
            i += 1
        if t_next > cfg.t_end:
            break
        ev = loop.propose(t_next)
        proposals += 1
        accepted += ev.accepted
        if log_ is not None:
            log_.append(ev)
    if loop.frozen and cfg.truncation_m is not None:
        log.info("g_m cutoff froze the jump dynamics (m=%s)", cfg.truncation_m)
    return Trajectory(states, log_, bool(loop.frozen and cfg.truncation_m is not None),
                      proposals, accepted, cfg.truncation_m)


def simulate(ks: KernelSet, state0: ParticleState, cfg: SimConfig,
             rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Simulate from ``state0`` and record snapshots at ``cfg.output_times``.

    Deterministic given ``cfg.seed`` (or the supplied generator).
    """
    if not ks.sigma.is_constant and cfg.truncation_m is None and cfg.majorant == "global":
        raise ValueError("sigma with gamma > 0 needs truncation_m")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return _run(ks, state0, cfg, rng)


# -- observables -------------------------------------------------------------

def second_moment(state: ParticleState) -> float:
    """(1/N) sum_k |v_k|^2."""
    return float(np.mean(np.sum(state.velocities**2, axis=1)))


def mean_velocity(state: ParticleState) -> np.ndarray:
    return state.velocities.mean(axis=0)


def mean_position(state: ParticleState) -> np.ndarray:
    return state.positions.mean(axis=0)


def _bracket_moment(q: float, state: ParticleState) -> float:
    return float(np.mean(bracket(state.velocities) ** q))


def _exp_bracket_moment(delta: float, kappa: float, state: ParticleState) -> float:
    return float(np.mean(np.exp(delta * bracket(state.velocities) ** kappa)))


def bracket_moment(q: float) -> Callable[[ParticleState], float]:
    """Observable (1/N) sum_k <v_k>^q."""
    return partial(_bracket_moment, float(q))


def exp_bracket_moment(delta: float, kappa: float) -> Callable[[ParticleState], float]:
    """Observable (1/N) sum_k exp(delta <v_k>^kappa)."""
    return partial(_exp_bracket_moment, float(delta), float(kappa))


DEFAULT_OBSERVABLES = {
    "m2": second_moment,
    "mean_velocity": mean_velocity,
    "mean_position": mean_position,
}


@dataclass
class EnsembleSummary:
    times: np.ndarray
    n_runs: int
    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)
    frozen_runs: int = 0

    def sem(self, name: str) -> np.ndarray:
        if self.n_runs < 2:
            return np.full_like(self.mean[name], np.nan)
        return np.sqrt(self.var[name] / self.n_runs)


def _replica(ks, init_sampler, cfg, observables, index):
    rng = np.random.default_rng(derive_seed(cfg.seed, index))
    state0 = init_sampler(rng)
    traj = _run(ks, state0, cfg, rng)
    values = {name: np.array([np.asarray(f(s), dtype=float) for s in traj.states])
              for name, f in observables.items()}
    return values, traj.truncation_frozen


def _replica_chunk(ks, init_sampler, cfg, observables, indices):
    return [_replica(ks, init_sampler, cfg, observables, i) for i in indices]


def run_replicas(fn, n: int, jobs: int = 1):
    """Evaluate ``fn(list_of_indices)`` over 0..n-1, in order, on ``jobs`` workers."""
    if jobs <= 1 or n < 2:
        return fn(list(range(n)))
    chunks = [list(c) for c in np.array_split(np.arange(n), min(jobs * 4, n)) if len(c)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        out = []
        for part in pool.map(fn, [[int(i) for i in c] for c in chunks]):
            out.extend(part)
    return out


def ensemble(ks: KernelSet, init_sampler: Callable[[np.random.Generator], ParticleState],
             M_runs: int, cfg: SimConfig,
             observables: Optional[Mapping[str, Callable]] = None, jobs: int = 1) -> EnsembleSummary:
    """Run ``M_runs`` independent replicas and aggregate observables per output time.

    Replica i draws its initial state and its jumps from one generator seeded
    with ``derive_seed(cfg.seed, i)``, so results do not depend on ``jobs``.
    """
    if M_runs < 1:
        raise ValueError("M_runs must be >= 1")
    observables = dict(DEFAULT_OBSERVABLES if observables is None else observables)
    results = run_replicas(partial(_replica_chunk, ks, init_sampler, cfg, observables), M_runs, jobs)
    summary = EnsembleSummary(np.asarray(cfg.output_times), M_runs)
    for name in observables:
        stacked = np.stack([r[0][name] for r in results])
        summary.mean[name] = stacked.mean(axis=0)
        summary.var[name] = stacked.var(axis=0, ddof=1) if M_runs > 1 else np.zeros_like(stacked[0])
    summary.frozen_runs = sum(r[1] for r in results)
    return summary


def simulate_replicas(ks: KernelSet, init_sampler, M_runs: int, cfg: SimConfig,
                      jobs: int = 1) -> list:
    """Full trajectories of ``M_runs`` replicas, seeded as in :func:`ensemble`."""
    return run_replicas(partial(_trajectory_chunk, ks, init_sampler, cfg), M_runs, jobs)


def _trajectory_chunk(ks, init_sampler, cfg, indices):
    out = []
    for i in indices:
        rng = np.random.default_rng(derive_seed(cfg.seed, i))
        out.append(_run(ks, init_sampler(rng), cfg, rng))
    return out
