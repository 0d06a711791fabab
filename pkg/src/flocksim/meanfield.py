"""Solvers for the nonlinear (McKean-Vlasov) jump dynamics.

Three routes to the time marginals mu_t:

* ``direct_mckean``: the M-particle system, read off as empirical measures.
* ``linear_jump_simulate``: M independent particles jumping against a frozen
  marginal flow (piecewise constant in time, left grid point).
* ``picard_iterate``: repeated linear solves until the flow stops moving.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence

import numpy as np

from .kernels import KernelSet
from .laws import ProductLaw
from .metrics import EmpiricalMeasure, free_transport, w1_exact
from .particles import ParticleState, SimConfig, Trajectory, derive_seed, run_replicas, simulate

log = logging.getLogger(__name__)


@dataclass
class MarginalFlow:
    """Empirical marginals mu_t on a time grid starting at 0."""

    times: np.ndarray
    measures: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.measures) or len(self.times) == 0:
            raise ValueError("need one measure per grid time")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("grid times must start at 0 and increase strictly")
        if len({m.n for m in self.measures}) != 1:
            raise ValueError("all marginals must have the same sample count")

    @property
    def n_samples(self) -> int:
        return self.measures[0].n

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def index_at(self, t: float) -> int:
        """Grid index of the nearest grid point at or before ``t``."""
        if t < 0:
            raise ValueError("t must be >= 0")
        return min(int(np.searchsorted(self.times, t, side="right")) - 1, len(self.times) - 1)

    def at(self, t: float) -> EmpiricalMeasure:
        return self.measures[self.index_at(t)]

    def restrict(self, times: Sequence[float]) -> "MarginalFlow":
        """Sub-flow on the grid points at or before each of ``times`` (0 always kept)."""
        idx = sorted({0, *(self.index_at(t) for t in times)})
        return MarginalFlow(self.times[idx], [self.measures[i] for i in idx])

    def stacked(self):
        """Arrays (T, n, d) of positions and velocities and (T, n) of weights."""
        return (np.stack([m.positions for m in self.measures]),
                np.stack([m.velocities for m in self.measures]),
                np.stack([m.weights for m in self.measures]))

    def to_csv(self, path) -> None:
        """Long format: t, sample_id (1-based), r_0.., v_0.., weight."""
        d = self.measures[0].d
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "sample_id"] + [f"r_{i}" for i in range(d)]
                       + [f"v_{i}" for i in range(d)] + ["weight"])
            for t, m in zip(self.times, self.measures):
                for s in range(m.n):
                    w.writerow([repr(float(t)), s + 1, *map(repr, m.positions[s].tolist()),
                                *map(repr, m.velocities[s].tolist()), repr(float(m.weights[s]))])

    @classmethod
    def from_csv(cls, path) -> "MarginalFlow":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        d = sum(h.startswith("r_") for h in header)
        times = np.unique(body[:, 0])
        measures = []
        for t in times:
            block = body[body[:, 0] == t]
            block = block[np.argsort(block[:, 1])]
            measures.append(EmpiricalMeasure(block[:, 2:2 + d], block[:, 2 + d:2 + 2 * d], block[:, -1]))
        return cls(times, measures)


@dataclass
class PicardReport:
    iterations: int = 0
    discrepancies: list = field(default_factory=list)
    converged: bool = False


def flow_grid(t_end: float, output_times: Sequence[float] = (), dt: Optional[float] = None) -> np.ndarray:
    """Uniform grid on [0, t_end] (default spacing t_end/100) merged with ``output_times``."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    dt = t_end / 100 if dt is None else dt
    n = max(1, int(math.ceil(t_end / dt - 1e-9)))
    grid = np.concatenate([np.linspace(0.0, t_end, n + 1), np.asarray(output_times, dtype=float)])
    return np.unique(grid)


# -- direct M-particle approximation ------------------------------------------

def direct_mckean(ks: KernelSet, mu0: ProductLaw, M: int, cfg: SimConfig, *, initial=None):
    """Simulate the M-particle system from mu0^{(x) M}.

    ``initial=(r0, v0)`` replaces the i.i.d. draw by given starting samples,
    e.g. the ones of :func:`initial_samples` to share them with a Picard run.
    Returns ``(flow, trajectory)``; the flow holds the empirical measures at
    0 and ``cfg.output_times``.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    times = np.unique(np.concatenate([[0.0], cfg.output_times]))
    run_cfg = SimConfig(cfg.t_end, tuple(times), cfg.seed, cfg.truncation_m,
                        cfg.record_jump_log, cfg.exclude_diagonal, cfg.majorant)
    rng = np.random.default_rng(cfg.seed)
    if initial is None:
        state0 = mu0.with_n(M)(rng)
    else:
        state0 = ParticleState(0.0, *initial)
        if state0.N != M:
            raise ValueError("initial samples do not match M")
    traj: Trajectory = simulate(ks, state0, run_cfg, rng)
    flow = MarginalFlow(times, [EmpiricalMeasure.from_state(s) for s in traj.states])
    return flow, traj


# -- linearized dynamics against a frozen flow --------------------------------

def linear_rate(ks: KernelSet, frozen: EmpiricalMeasure, r, v) -> float:
    """sum_i w_i psi(r - q_i) sigma(v - w_i) over the frozen samples (q_i, w_i)."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.dot(frozen.weights, ks.psi(r - frozen.positions) * ks.sigma(v - frozen.velocities)))


def _particle_streams(base_seed: int, i: int):
    """Independent init/clock/select/accept/noise streams for particle i.

    Keying every stream by particle id keeps draws aligned across Picard
    iterations (common random numbers).
    """
    ss = np.random.SeedSequence(derive_seed(base_seed, i))
    return [np.random.default_rng(s) for s in ss.spawn(5)]


def initial_samples(mu0: ProductLaw, M: int, base_seed: int):
    """The (r, v) starting points of the M linearized particles, shape (M, d)."""
    r = np.empty((M, mu0.d))
    v = np.empty((M, mu0.d))
    for i in range(M):
        init = _particle_streams(base_seed, i)[0]
        ri, vi = mu0.sample_arrays(init, 1)
        r[i], v[i] = ri[0], vi[0]
    return r, v


def _linear_particle(ks: KernelSet, grid, Q, W, Wt, cum_w, mu0: ProductLaw, base_seed: int, i: int):
    init, clock, select, accept, noise = _particle_streams(base_seed, i)
    r0, v0 = mu0.sample_arrays(init, 1)
    r, v = r0[0].copy(), v0[0].copy()
    T = len(grid)
    t_end = grid[-1]
    out_r = np.empty((T, r.size))
    out_v = np.empty((T, r.size))
    psi_max = ks.psi.psi_max
    const_sigma = ks.sigma.is_constant

    def sigma_cum(c):
        # cumulative w_i sigma(v - w_i) over the frozen samples of cell c
        return np.cumsum(Wt[c] * ks.sigma(v - W[c]))

    t, c, g = 0.0, 0, 0
    cum = None if const_sigma else sigma_cum(0)
    while True:
        total = ks.sigma.growth_constant * cum_w[c, -1] if const_sigma else cum[-1]
        rate = psi_max * total
        t_prop = t + clock.exponential(1.0 / rate) if rate > 0 else math.inf
        # with velocity-dependent sigma the majorant is only valid inside the cell
        t_cap = grid[c + 1] if (not const_sigma and c + 1 < T) else math.inf
        t_next = min(t_prop, t_cap)
        while g < T and grid[g] <= min(t_next, t_end):
            out_r[g] = r + (grid[g] - t) * v
            out_v[g] = v
            g += 1
        if t_next > t_end:
            break
        if t_prop >= t_cap:
            r = r + (t_cap - t) * v
            t, c = t_cap, c + 1
            cum = sigma_cum(c)
            continue
        r = r + (t_prop - t) * v
        t = t_prop
        if const_sigma:
            c = min(int(np.searchsorted(grid, t, side="right")) - 1, T - 1)
            weights_cum = cum_w[c]
        else:
            weights_cum = cum
        s = min(int(np.searchsorted(weights_cum, select.random() * weights_cum[-1], side="right")),
                len(weights_cum) - 1)
        ratio = float(ks.psi(r - Q[c, s])) / psi_max
        if not 0.0 <= ratio <= 1.0 + 1e-12:
            raise AssertionError(f"thinning ratio {ratio} outside [0, 1]; majorant is invalid")
        if accept.random() < ratio:
            v = W[c, s] + ks.noise.sample(noise)
            if not const_sigma:
                cum = sigma_cum(c)
    return out_r, out_v


def _linear_chunk(ks, grid, Q, W, Wt, mu0, base_seed, indices):
    cum_w = np.cumsum(Wt, axis=1)
    return [_linear_particle(ks, grid, Q, W, Wt, cum_w, mu0, base_seed, i) for i in indices]


def linear_jump_simulate(ks: KernelSet, flow_prev: MarginalFlow, mu0: ProductLaw, M: int,
                         cfg: SimConfig, rng: Optional[np.random.Generator] = None,
                         *, jobs: int = 1) -> MarginalFlow:
    """M independent particles driven by the frozen flow ``flow_prev``.

    A particle at (r, v) jumps at rate linear_rate(flow_prev.at(t), r, v); on
    a jump it picks frozen sample (q, w) with probability proportional to
    psi(r - q) sigma(v - w) and takes velocity w + u. The output lives on
    ``flow_prev.times``. Per-particle streams come from ``cfg.seed`` (or one
    draw from ``rng``).
    """
    if flow_prev.t_end < cfg.t_end - 1e-12:
        raise ValueError("frozen flow does not cover [0, t_end]")
    base_seed = cfg.seed if rng is None else int(rng.integers(2**63))
    grid = flow_prev.times[flow_prev.times <= cfg.t_end + 1e-12]
    Q, W, Wt = flow_prev.stacked()
    T = len(grid)
    Q, W, Wt = Q[:T], W[:T], Wt[:T]
    results = run_replicas(partial(_linear_chunk, ks, grid, Q, W, Wt, mu0, base_seed), M, jobs)
    R = np.stack([res[0] for res in results], axis=1)
    V = np.stack([res[1] for res in results], axis=1)
    return MarginalFlow(grid, [EmpiricalMeasure(R[g], V[g]) for g in range(T)])


def transport_flow(r0: np.ndarray, v0: np.ndarray, grid) -> MarginalFlow:
    """Flow of free transport from the samples (r0, v0)."""
    em = EmpiricalMeasure(r0, v0)
    return MarginalFlow(grid, [free_transport(em, float(t)) for t in grid])


def flow_discrepancy(a: MarginalFlow, b: MarginalFlow, times: Sequence[float]) -> float:
    """max over ``times`` of W1(a_t, b_t)."""
    return max(w1_exact(a.at(t), b.at(t)) for t in times)


def picard_iterate(ks: KernelSet, mu0: ProductLaw, M: int, cfg: SimConfig, max_iter: int = 10,
                   tol: float = 0.05, *, grid_dt: Optional[float] = None, jobs: int = 1):
    """Fixed-point iteration flow_k = linear_jump_simulate(flow_{k-1}).

    flow_0 is free transport of the initial samples. Stops once the sup over
    ``cfg.output_times`` of W1(flow_k, flow_{k-1}) drops below ``tol``.
    Returns ``(flow, PicardReport)``; non-convergence is reported, not raised.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    grid = flow_grid(cfg.t_end, cfg.output_times, grid_dt)
    check_times = [t for t in cfg.output_times if t > 0] or [cfg.t_end]
    r0, v0 = initial_samples(mu0, M, cfg.seed)
    flow = transport_flow(r0, v0, grid)
    report = PicardReport()
    for _ in range(max_iter):
        new = linear_jump_simulate(ks, flow, mu0, M, cfg, jobs=jobs)
        disc = flow_discrepancy(new, flow, check_times)
        report.iterations += 1
        report.discrepancies.append(disc)
        log.info("picard iteration %d: discrepancy %.4g", report.iterations, disc)
        flow = new
        if disc < tol:
            report.converged = True
            break
    if report.converged and len(report.discrepancies) > 2:
        tail = report.discrepancies[1:]
        if any(b > a for a, b in zip(tail, tail[1:])):
            log.warning("picard discrepancies increased after iteration 2: %s", report.discrepancies)
    return flow, report


# -- propagation of chaos ---------------------------------------------------------

@dataclass
class ChaosRow:
    N: int
    t: float
    w1: float
    se: float


@dataclass
class ChaosTable:
    rows: list
    noise_floor: dict        # t -> W1 of an independent reference subsample
    replicas: int
    M_ref: int

    def value(self, N: int, t: float) -> ChaosRow:
        for row in self.rows:
            if row.N == N and row.t == t:
                return row
        raise KeyError((N, t))


def _tagged_chunk(ks, mu0, cfg, N, indices):
    out = []
    for i in indices:
        rng = np.random.default_rng(derive_seed(derive_seed(cfg.seed, N), i))
        traj = simulate(ks, mu0.with_n(N)(rng), cfg, rng)
        out.append(np.stack([np.concatenate([s.positions[0], s.velocities[0]]) for s in traj.states]))
    return out


def _bootstrap_se(sample: np.ndarray, ref: EmpiricalMeasure, d: int, B: int, rng) -> float:
    n = sample.shape[0]
    vals = []
    for _ in range(B):
        counts = np.bincount(rng.integers(n, size=n), minlength=n)
        keep = counts > 0
        em = EmpiricalMeasure(sample[keep, :d], sample[keep, d:], counts[keep] / n)
        vals.append(w1_exact(em, ref))
    return float(np.std(vals, ddof=1)) if B > 1 else float("nan")


def chaos_study(ks: KernelSet, mu0: ProductLaw, N_list: Sequence[int], M_ref: int, cfg: SimConfig,
                *, replicas: int = 500, bootstrap: int = 20, jobs: int = 1) -> ChaosTable:
    """W1 between the law of particle 0 of an N-system and the reference marginal.

    The reference is ``direct_mckean(M_ref)``. Particle 0's law is estimated
    from ``replicas`` independent N-particle runs seeded by (seed, N, i).
    The noise floor compares a ``replicas``-sized subsample of an independently
    seeded reference run with the reference, matching the sample size of the
    tagged estimates. N == M_ref reuses the reference run itself (distance 0).
    """
    if any(N > M_ref for N in N_list):
        raise ValueError("M_ref must be at least max(N_list)")
    times = [t for t in cfg.output_times]
    ref_flow, _ = direct_mckean(ks, mu0, M_ref, cfg)
    alt_cfg = SimConfig(cfg.t_end, cfg.output_times, derive_seed(cfg.seed, 2**32), cfg.truncation_m,
                        False, cfg.exclude_diagonal, cfg.majorant)
    alt_flow, _ = direct_mckean(ks, mu0, M_ref, alt_cfg)
    d = mu0.d
    boot_rng = np.random.default_rng(derive_seed(cfg.seed, 2**32 + 1))
    sub = boot_rng.choice(M_ref, size=min(replicas, M_ref), replace=False)
    noise_floor = {}
    for t in times:
        alt = alt_flow.at(t)
        noise_floor[t] = w1_exact(EmpiricalMeasure(alt.positions[sub], alt.velocities[sub]), ref_flow.at(t))
    rows = []
    for N in N_list:
        if N == M_ref:
            rows.extend(ChaosRow(N, t, 0.0, 0.0) for t in times)
            continue
        tagged = np.stack(run_replicas(partial(_tagged_chunk, ks, mu0, cfg, N), replicas, jobs))
        for ti, t in enumerate(times):
            sample = tagged[:, ti, :]
            ref = ref_flow.at(t)
            w1 = w1_exact(EmpiricalMeasure(sample[:, :d], sample[:, d:]), ref)
            rows.append(ChaosRow(N, t, w1, _bootstrap_se(sample, ref, d, bootstrap, boot_rng)))
    return ChaosTable(rows, noise_floor, replicas, M_ref)
