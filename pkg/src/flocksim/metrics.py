"""Functionals and distances on weighted point measures in phase space R^{2d}."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .kernels import bracket

# POT probes every array backend on import; only numpy is needed here.
for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

import ot  # noqa: E402

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class EmpiricalMeasure:
    """sum_i w_i delta_(r_i, v_i) with arrays of shape (n, d)."""

    positions: np.ndarray
    velocities: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        r = np.array(self.positions, dtype=float, ndmin=2)
        v = np.array(self.velocities, dtype=float, ndmin=2)
        if r.shape != v.shape or r.shape[0] == 0:
            raise ValueError("need a nonempty set of (r, v) samples of matching shape")
        n = r.shape[0]
        w = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "positions", r)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    @classmethod
    def from_state(cls, state) -> "EmpiricalMeasure":
        return cls(state.positions, state.velocities)

    def points(self) -> np.ndarray:
        return np.hstack([self.positions, self.velocities])


def moment_q(em: EmpiricalMeasure, q: float) -> float:
    """sum_i w_i <v_i>^q."""
    if q < 0:
        raise ValueError("q must be >= 0")
    return float(np.dot(em.weights, bracket(em.velocities) ** q))


def exp_moment(em: EmpiricalMeasure, delta: float, kappa: float) -> float:
    """sum_i w_i exp(delta <v_i>^kappa)."""
    return float(np.dot(em.weights, np.exp(delta * bracket(em.velocities) ** kappa)))


def free_transport(em: EmpiricalMeasure, t: float) -> EmpiricalMeasure:
    """Push forward under (r, v) -> (r + t v, v)."""
    return EmpiricalMeasure(em.positions + t * em.velocities, em.velocities, em.weights)


def metric_t(x, y, t: float = 0.0) -> float:
    """|(r - v t) - (r~ - v~ t)| + |v - v~| for phase points x = (r, v), y = (r~, v~)."""
    (r, v), (rr, vv) = x, y
    r, v, rr, vv = (np.asarray(a, dtype=float) for a in (r, v, rr, vv))
    return float(np.linalg.norm((r - v * t) - (rr - vv * t)) + np.linalg.norm(v - vv))


def cost_matrix(em1: EmpiricalMeasure, em2: EmpiricalMeasure, t: float = 0.0) -> np.ndarray:
    """Pairwise metric_t costs between the samples of two measures."""
    a = em1.positions - t * em1.velocities
    b = em2.positions - t * em2.velocities
    dr = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    dv = np.linalg.norm(em1.velocities[:, None, :] - em2.velocities[None, :, :], axis=-1)
    return dr + dv


def w1_exact(em1: EmpiricalMeasure, em2: EmpiricalMeasure, t: float = 0.0) -> float:
    """Wasserstein-1 distance for the ground metric ``metric_t``.

    Equal-size uniform measures go through an exact assignment solver;
    anything else through the exact network-simplex transport solver.
    """
    if em1.d != em2.d:
        raise ValueError("measures live in different dimensions")
    C = cost_matrix(em1, em2, t)
    if em1.n == em2.n and em1.is_uniform and em2.is_uniform:
        rows, cols = linear_sum_assignment(C)
        return float(C[rows, cols].mean())
    return float(ot.emd2(em1.weights, em2.weights, C, numItermax=10_000_000))


@dataclass(frozen=True)
class HistogramGrid:
    """Per-axis bin edges over the 2d phase coordinates (r first, then v)."""

    edges: tuple

    @classmethod
    def covering(cls, *measures: EmpiricalMeasure, bins: Optional[int] = None) -> "HistogramGrid":
        """Equal-width bins over the pooled support.

        Default bins per axis: ceil(n^(1/(2d+2))) with n the smallest sample count.
        """
        pts = np.vstack([m.points() for m in measures])
        dim = pts.shape[1]
        if bins is None:
            n = min(m.n for m in measures)
            bins = max(1, math.ceil(n ** (1.0 / (dim + 2))))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = np.where(hi > lo, 1e-9 * (hi - lo), 0.5)
        return cls(tuple(np.linspace(a - p, b + p, bins + 1) for a, b, p in zip(lo, hi, pad)))

    @property
    def bins_per_axis(self) -> tuple:
        return tuple(len(e) - 1 for e in self.edges)


@dataclass
class TVEstimate:
    value: float
    grid: HistogramGrid
    outside_mass: float = 0.0
    metadata: dict = field(default_factory=dict)


def tv_histogram(em1: EmpiricalMeasure, em2: EmpiricalMeasure,
                 grid: Optional[HistogramGrid] = None, *, detail: bool = False):
    """Histogram estimate of sup_{|g| <= 1} <g, mu - nu>, i.e. sum_bins |p - q|.

    Range is [0, 2] (2 for mutually singular measures). Binning can only merge
    mass, so on a fixed grid this is a lower bound of the binned measures' TV;
    with sampled inputs it carries a positive sampling bias instead.
    """
    grid = grid or HistogramGrid.covering(em1, em2)
    p, _ = np.histogramdd(em1.points(), bins=list(grid.edges), weights=em1.weights)
    q, _ = np.histogramdd(em2.points(), bins=list(grid.edges), weights=em2.weights)
    # mass that falls outside the grid is counted as its own (disjoint) bin
    out_p, out_q = 1.0 - p.sum(), 1.0 - q.sum()
    value = float(np.abs(p - q).sum() + abs(out_p - out_q))
    value = min(max(value, 0.0), 2.0)
    if not detail:
        return value
    return TVEstimate(value, grid, max(out_p, out_q), {
        "normalization": "sup_{|g|<=1} <g, mu - nu>, range [0, 2]",
        "bins_per_axis": list(grid.bins_per_axis),
        "estimator": "histogram",
    })
