"""Deterministic Cucker-Smale alignment dynamics (the zero-noise reference)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import PsiKernel
from .particles import NonFiniteStateError, ParticleState


def ode_rhs(psi: PsiKernel, positions: np.ndarray, velocities: np.ndarray):
    """Return (dr/dt, dv/dt) with dv_k/dt = (1/N) sum_j psi(r_k - r_j)(v_j - v_k)."""
    positions = np.asarray(positions, dtype=float)
    velocities = np.asarray(velocities, dtype=float)
    N = positions.shape[0]
    weights = psi(positions[:, None, :] - positions[None, :, :])
    dv = velocities[None, :, :] - velocities[:, None, :]
    # summand is antisymmetric in (k, j) because psi is symmetric
    return velocities.copy(), np.einsum("kj,kjd->kd", weights, dv) / N


@dataclass
class OdeTrajectory:
    times: np.ndarray
    positions: np.ndarray   # (T, N, d)
    velocities: np.ndarray  # (T, N, d)

    def state(self, i: int) -> ParticleState:
        return ParticleState(float(self.times[i]), self.positions[i], self.velocities[i])


def integrate(psi: PsiKernel, state0: ParticleState, t_end: float, dt: float = 1e-3,
              save_every: int = 1) -> OdeTrajectory:
    """Classical fixed-step RK4 from ``state0.t`` to ``t_end``.

    The last step is shortened to land on ``t_end`` exactly. Every
    ``save_every``-th step is stored, plus the final one.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    span = t_end - state0.t
    n_steps = max(int(np.ceil(span / dt - 1e-9)), 0)
    r, v = state0.positions.copy(), state0.velocities.copy()
    t = state0.t
    times, rs, vs = [t], [r.copy()], [v.copy()]
    for n in range(n_steps):
        h = min(dt, t_end - t)
        k1r, k1v = ode_rhs(psi, r, v)
        k2r, k2v = ode_rhs(psi, r + 0.5 * h * k1r, v + 0.5 * h * k1v)
        k3r, k3v = ode_rhs(psi, r + 0.5 * h * k2r, v + 0.5 * h * k2v)
        k4r, k4v = ode_rhs(psi, r + h * k3r, v + h * k3v)
        r = r + h / 6.0 * (k1r + 2 * k2r + 2 * k3r + k4r)
        v = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        t = state0.t + (n + 1) * dt if n + 1 < n_steps else t_end
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise NonFiniteStateError(f"ODE state became non-finite at t={t}")
        if (n + 1) % save_every == 0 or n + 1 == n_steps:
            times.append(t)
            rs.append(r.copy())
            vs.append(v.copy())
    return OdeTrajectory(np.array(times), np.array(rs), np.array(vs))


def flocking_diagnostics(traj: OdeTrajectory):
    """Velocity spread sum_k |v_k - v_c|^2 and position spread sum_k |r_k - r_c(t)|^2.

    v_c and r_c(0) are taken from the first snapshot and r_c(t) = r_c(0) + t v_c.
    """
    if len(traj.times) == 0:
        raise ValueError("empty trajectory")
    v_c = traj.velocities[0].mean(axis=0)
    r_c0 = traj.positions[0].mean(axis=0)
    elapsed = traj.times - traj.times[0]
    r_c = r_c0[None, :] + elapsed[:, None] * v_c[None, :]
    velocity_spread = np.sum((traj.velocities - v_c) ** 2, axis=(1, 2))
    position_spread = np.sum((traj.positions - r_c[:, None, :]) ** 2, axis=(1, 2))
    return velocity_spread, position_spread
