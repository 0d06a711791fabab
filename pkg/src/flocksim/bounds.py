"""Closed-form growth envelopes: Gronwall, Bihari-LaSalle, moment, TV and Osgood.

Every envelope is a plain function of ``t`` (scalar or array). The constants
that the analysis only asserts to exist are explicit parameters here; see
:func:`calibrate_constant` for fitting them to data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


def gronwall_linear(a0: float, K: float, t):
    """a0 e^{K t}."""
    if a0 < 0 or K < 0:
        raise ValueError("need a0 >= 0 and K >= 0")
    return a0 * np.exp(K * np.asarray(t, dtype=float))


def bihari_lasalle(f0: float, K: float, alpha: float, t):
    """(f0^alpha + alpha K t)^(1/alpha): the maximal solution of
    f(t) = f0 + K int_0^t f^(1-alpha)."""
    _check_bihari(f0, K, alpha)
    return (f0**alpha + alpha * K * np.asarray(t, dtype=float)) ** (1.0 / alpha)


def bihari_lasalle_relaxed(f0: float, K: float, alpha: float, t):
    """2^(1/alpha - 1) f0 + (2 alpha K)^(1/alpha) t^(1/alpha) / 2, which dominates
    :func:`bihari_lasalle`."""
    _check_bihari(f0, K, alpha)
    t = np.asarray(t, dtype=float)
    return 2.0 ** (1.0 / alpha - 1.0) * f0 + 0.5 * (2.0 * alpha * K) ** (1.0 / alpha) * t ** (1.0 / alpha)


def _check_bihari(f0, K, alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if f0 < 0 or K < 0:
        raise ValueError("need f0 >= 0 and K >= 0")


def moment_envelope(p: float, gamma: float, lam_2p: float, C: float, init_2p: float, t,
                    *, kind: str = "particle", prefactors: bool = True):
    """Upper bound for the averaged moment E (1/N) sum <V_j(t)>^(2p).

    ``kind="particle"`` (N-uniform bound), with C_p = C lam_2p 2^(5p):
      gamma < 2:  2^(4p^2/(2-gamma)) init + (C_p (2-gamma)/(2p))^(2p/(2-gamma)) t^(2p/(2-gamma))
      gamma = 2:  2^(2p) init e^(C_p t)
    ``kind="mean_field"``: C init + C t^(2p/(2-gamma)), or init e^(C t) for gamma = 2.

    ``prefactors=False`` drops the 2^(...) factors on ``init`` in the particle
    bound. That curve lies below the full envelope and is meant for
    calibrating C from observed growth.
    """
    if not 0.0 <= gamma <= 2.0:
        raise ValueError("gamma must lie in [0, 2]")
    if p < 0 or C < 0 or lam_2p < 0 or init_2p < 0:
        raise ValueError("p, C, lam_2p and init_2p must be nonnegative")
    t = np.asarray(t, dtype=float)
    if kind == "mean_field":
        if gamma == 2.0:
            return init_2p * np.exp(C * t)
        return C * init_2p + C * t ** (2 * p / (2 - gamma))
    if kind != "particle":
        raise ValueError("kind must be 'particle' or 'mean_field'")
    if p < 2:
        raise ValueError("the particle moment bound needs p >= 2")
    C_p = C * lam_2p * 2.0 ** (5 * p)
    if gamma == 2.0:
        return (2.0 ** (2 * p) if prefactors else 1.0) * init_2p * np.exp(C_p * t)
    expo = 2 * p / (2 - gamma)
    pre = 2.0 ** (4 * p * p / (2 - gamma)) if prefactors else 1.0
    return pre * init_2p + (C_p * (2 - gamma) / (2 * p)) ** expo * t**expo


def tv_envelope_bounded(tv0: float, psi_max: float, sigma_max: float, t, *, cap: float | None = None):
    """tv0 exp(4 psi_max sigma_max t), optionally capped (TV never exceeds 2)."""
    if not 0.0 <= tv0 <= 2.0:
        raise ValueError("tv0 must lie in [0, 2]")
    out = tv0 * np.exp(4.0 * psi_max * sigma_max * np.asarray(t, dtype=float))
    return out if cap is None else np.minimum(out, cap)


def osgood_envelope(rho0: float, C: float, t):
    """Maximal solution of rho' = C rho (1 + |ln rho|), rho(0) = rho0 in (0, 1).

    Below 1 this is exp(1 - (1 - ln rho0) e^{-Ct}); it reaches 1 at
    t* = ln(1 - ln rho0) / C and continues as exp(e^{C (t - t*)} - 1).
    """
    if not 0.0 < rho0 < 1.0:
        raise ValueError("rho0 must lie in (0, 1)")
    if not C > 0:
        raise ValueError("C must be positive")
    t = np.asarray(t, dtype=float)
    y0 = 1.0 - math.log(rho0)
    t_star = math.log(y0) / C
    below = np.exp(1.0 - y0 * np.exp(-C * np.minimum(t, t_star)))
    above = np.exp(np.expm1(C * np.maximum(t - t_star, 0.0)))
    return np.where(t <= t_star, below, above)


def osgood_inverse_gap(rho0: float, rho: float, C: float) -> float:
    """G(rho0) - G(rho) with G(x) = int_x^1 dy / (C y (1 + |ln y|)).

    Any rho(t) obeying the integral inequality satisfies G(rho0) - G(rho(t)) <= t.
    """
    def G(x):
        return math.log(1.0 - math.log(x)) / C if x <= 1.0 else -math.log(1.0 + math.log(x)) / C
    return G(rho0) - G(rho)


def exp_moment_envelope(init: float, C: float, t):
    """init e^{C t}."""
    if init < 1.0:
        raise ValueError("an exponential moment is always >= 1")
    if C < 0:
        raise ValueError("C must be nonnegative")
    return init * np.exp(C * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class BoundEnvelope:
    """A named envelope curve t -> bound(t) with its parameters."""

    family: str
    params: dict = field(default_factory=dict)

    _FAMILIES = {
        "gronwall_linear": gronwall_linear,
        "bihari_lasalle": bihari_lasalle,
        "moment": moment_envelope,
        "tv_bounded": tv_envelope_bounded,
        "osgood": osgood_envelope,
        "exp_moment": exp_moment_envelope,
    }

    def __post_init__(self):
        if self.family not in self._FAMILIES:
            raise ValueError(f"unknown envelope family {self.family!r}")

    def __call__(self, t):
        return self._FAMILIES[self.family](t=t, **self.params)

    def to_csv(self, path, times: Sequence[float]) -> None:
        values = np.atleast_1d(self(np.asarray(times, dtype=float)))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "bound"])
            for t, b in zip(times, values):
                w.writerow([repr(float(t)), repr(float(b))])


def calibrate_constant(envelope: Callable[[float, np.ndarray], np.ndarray], times, observed,
                       *, safety: float = 10.0, c_max: float = 1e6) -> float:
    """Smallest C >= 0 with envelope(C, times) >= observed, times ``safety``.

    ``envelope(C, t)`` must be nondecreasing in C. Returns 0 when the C = 0
    envelope already dominates; bisection to relative precision 1e-9 otherwise.
    """
    times = np.asarray(times, dtype=float)
    observed = np.asarray(observed, dtype=float)

    def ok(c):
        # an overflowing envelope (inf) still dominates
        with np.errstate(over="ignore"):
            return bool(np.all(envelope(c, times) >= observed))

    if ok(0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    while not ok(hi):
        lo, hi = hi, hi * 2.0
        if hi > c_max:
            raise ValueError("no constant below c_max makes the envelope dominate the data")
    while hi - lo > 1e-9 * hi:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return safety * hi
