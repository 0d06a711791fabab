"""Numerical certification of the moment inequalities behind the particle bounds.

Noise is the two-point law 1/2 (delta_{u0} + delta_{-u0}), so every u-integral
is an exact two-term average and lambda_{2p} = |u0|^{2p}.

Inequalities with an unspecified constant C (drift and absolute moment
estimates) are written with C factored out. Their unit right-hand side also
carries the kernel scale psi_max * c_sigma so one dimensionless C can serve
every kernel instance with the same (p, gamma).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kernels import PsiKernel, SigmaKernel, bracket


@dataclass(frozen=True)
class ConfigSample:
    positions: np.ndarray
    velocities: np.ndarray
    psi: PsiKernel
    sigma: SigmaKernel
    u0: np.ndarray
    p: float = 2.0
    delta: float = 0.5
    kappa: float = 1.0

    @property
    def N(self) -> int:
        return self.velocities.shape[0]

    @property
    def gamma(self) -> float:
        return self.sigma.exponent

    @property
    def lam_2p(self) -> float:
        return float(np.sum(self.u0 * self.u0)) ** self.p

    @property
    def kernel_scale(self) -> float:
        return self.psi.psi_max * self.sigma.growth_constant

    def pair_weights(self) -> np.ndarray:
        """W[k, j] = psi(r_k - r_j) sigma(v_k - v_j)."""
        r, v = self.positions, self.velocities
        return self.psi(r[:, None] - r[None, :]) * self.sigma(v[:, None] - v[None, :])


@dataclass(frozen=True)
class InequalityCheck:
    lhs: float
    rhs: float
    holds: bool

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


def _shifted(v: np.ndarray, u0: np.ndarray):
    return v + u0, v - u0


def drift_unit_rhs(cs: ConfigSample) -> float:
    """lambda_{2p} 2^{3p} psi_max c_sigma (1/N) sum_j <v_j>^{2p-2+gamma}."""
    b = bracket(cs.velocities)
    return cs.lam_2p * 2.0 ** (3 * cs.p) * cs.kernel_scale * float(np.mean(b ** (2 * cs.p - 2 + cs.gamma)))


def drift_lhs(cs: ConfigSample) -> float:
    W = cs.pair_weights()
    plus, minus = _shifted(cs.velocities, cs.u0)
    after = 0.5 * (np.linalg.norm(plus, axis=1) ** (2 * cs.p) + np.linalg.norm(minus, axis=1) ** (2 * cs.p))
    before = np.linalg.norm(cs.velocities, axis=1) ** (2 * cs.p)
    # rows k, columns j: the k-th velocity is replaced by v_j + u
    return float(np.sum(W * (after[None, :] - before[:, None]))) / cs.N**2


def check_drift_inequality(cs: ConfigSample, C: float = 1.0) -> InequalityCheck:
    """(1/N^2) sum_kj psi sigma int (|v_j + u|^{2p} - |v_k|^{2p}) a(du) <= C * unit rhs."""
    if cs.p < 2:
        raise ValueError("the drift estimate needs p >= 2")
    lhs, rhs = drift_lhs(cs), C * drift_unit_rhs(cs)
    return InequalityCheck(lhs, rhs, lhs <= rhs)


def abs_unit_rhs(cs: ConfigSample) -> float:
    """lambda_{2p} 2^{2p} psi_max c_sigma (1/N) sum_j <v_j>^{2p+gamma}."""
    b = bracket(cs.velocities)
    return cs.lam_2p * 2.0 ** (2 * cs.p) * cs.kernel_scale * float(np.mean(b ** (2 * cs.p + cs.gamma)))


def abs_lhs(cs: ConfigSample) -> float:
    W = cs.pair_weights()
    plus, minus = _shifted(cs.velocities, cs.u0)
    before = bracket(cs.velocities) ** (2 * cs.p)
    diff = 0.5 * (np.abs(bracket(plus)[None, :] ** (2 * cs.p) - before[:, None])
                  + np.abs(bracket(minus)[None, :] ** (2 * cs.p) - before[:, None]))
    return float(np.sum(W * diff)) / cs.N**2


def check_abs_inequality(cs: ConfigSample, C: float = 1.0) -> InequalityCheck:
    """(1/N^2) sum_kj psi sigma int |<v_j + u>^{2p} - <v_k>^{2p}| a(du) <= C * unit rhs."""
    if cs.p < 0.5:
        raise ValueError("the absolute moment estimate needs p >= 1/2")
    lhs, rhs = abs_lhs(cs), C * abs_unit_rhs(cs)
    return InequalityCheck(lhs, rhs, lhs <= rhs)


def check_exp_inequality(cs: ConfigSample) -> InequalityCheck:
    """Exponential-moment estimate for bounded sigma (fully explicit constant).

    lhs = (1/N^2) sum_kj psi sigma int |e^{delta <v_j+u>^kappa} - e^{delta <v_k>^kappa}| a(du)
    rhs = psi_max |sigma|_inf (1 + e^delta c(delta, kappa)) / N sum_j e^{delta <v_j>^kappa}
    """
    if cs.gamma != 0.0:
        raise ValueError("the exponential estimate needs bounded sigma (gamma = 0)")
    if not (cs.delta > 0 and 0 < cs.kappa <= 1):
        raise ValueError("need delta > 0 and kappa in (0, 1]")
    W = cs.pair_weights()
    d_, k_ = cs.delta, cs.kappa
    plus, minus = _shifted(cs.velocities, cs.u0)
    before = np.exp(d_ * bracket(cs.velocities) ** k_)
    diff = 0.5 * (np.abs(np.exp(d_ * bracket(plus) ** k_)[None, :] - before[:, None])
                  + np.abs(np.exp(d_ * bracket(minus) ** k_)[None, :] - before[:, None]))
    lhs = float(np.sum(W * diff)) / cs.N**2
    c_dk = math.exp(d_ * float(np.linalg.norm(cs.u0)) ** k_)
    rhs = cs.psi.psi_max * cs.sigma.sup * (1.0 + math.exp(d_) * c_dk) * float(np.mean(before))
    return InequalityCheck(lhs, rhs, lhs <= rhs)


def check_cancellation(cs: ConfigSample, rtol: float = 1e-9):
    """Residual of sum_kj psi sigma (|v_j|^{2p} - |v_k|^{2p}), which vanishes by symmetry.

    Returns (residual, scale, holds) with scale = sum_kj psi sigma |v_j|^{2p}.
    """
    W = cs.pair_weights()
    a = np.linalg.norm(cs.velocities, axis=1) ** (2 * cs.p)
    residual = float(np.sum(W * (a[None, :] - a[:, None])))
    scale = float(np.sum(W * a[None, :]))
    return residual, scale, abs(residual) <= rtol * max(scale, np.finfo(float).tiny)


def _young_sides(cs: ConfigSample):
    g, p2 = cs.gamma, 2 * cs.p
    b = bracket(cs.velocities)
    lhs = b[:, None] ** p2 * b[None, :] ** g
    rhs = p2 / (p2 + g) * b[:, None] ** (p2 + g) + g / (p2 + g) * b[None, :] ** (p2 + g)
    return lhs, rhs


def young_margin(cs: ConfigSample) -> float:
    """max over pairs of (lhs - rhs) / rhs in the Young inequality.

    Nonpositive up to rounding (the diagonal pairs are equality cases).
    """
    lhs, rhs = _young_sides(cs)
    return float(np.max((lhs - rhs) / rhs))


def check_young(cs: ConfigSample, rtol: float = 1e-12) -> bool:
    """<v_j>^{2p} <v_k>^g <= 2p/(2p+g) <v_j>^{2p+g} + g/(2p+g) <v_k>^{2p+g} for all pairs.

    ``rtol`` absorbs rounding at the equality case v_j = v_k.
    """
    lhs, rhs = _young_sides(cs)
    return bool(np.all(lhs <= rhs * (1.0 + rtol)))


def random_config(rng: np.random.Generator, *, p: float, gamma: float, n_max: int = 8,
                  d_max: int = 3, v_max: float = 5.0, u0_range=(0.5, 2.0)) -> ConfigSample:
    """A random finite configuration with random kernels of the requested gamma.

    |u0| is kept away from 0: the right-hand sides scale with lambda_{2p} while
    the left-hand sides also contain lower noise moments.
    """
    N = int(rng.integers(1, n_max + 1))
    d = int(rng.integers(1, d_max + 1))

    def ball(n, radius):
        z = rng.standard_normal((n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return z * (radius * rng.random(n))[:, None]

    psi = (PsiKernel.rational(rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0)) if rng.random() < 0.7
           else PsiKernel.constant(rng.uniform(0.5, 2.0)))
    c = rng.uniform(0.5, 2.0)
    sigma = SigmaKernel.constant(c) if gamma == 0 else SigmaKernel.bracket_power(c, gamma)
    u0 = ball(1, 1.0)[0]
    u0 = u0 / max(np.linalg.norm(u0), 1e-300) * rng.uniform(*u0_range)
    return ConfigSample(
        positions=rng.uniform(-5.0, 5.0, (N, d)),
        velocities=ball(N, v_max),
        psi=psi, sigma=sigma, u0=u0, p=float(p),
        delta=rng.uniform(0.1, 1.0), kappa=rng.uniform(0.1, 1.0),
    )


@dataclass
class CertificationReport:
    lemma: str
    samples: int
    violations: int
    max_margin: float   # max of lhs - rhs (relative for young); <= 0 when every sample holds
    calibrated_C: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        out = {"lemma": self.lemma, "samples": self.samples, "violations": self.violations,
               "max_margin": self.max_margin, "calibrated_C": self.calibrated_C}
        out.update(self.extra)
        return out


def calibrate(lhs_fn: Callable[[ConfigSample], float], unit_fn: Callable[[ConfigSample], float],
              batch, safety: float = 10.0) -> float:
    """C := safety * max over the batch of lhs / unit rhs (0 if no lhs is positive)."""
    ratios = [lhs_fn(cs) / unit_fn(cs) for cs in batch if lhs_fn(cs) > 0]
    return safety * max(ratios, default=0.0)


def certify_constant_free(rng: np.random.Generator, samples: int, *, p: float = 2.0) -> list:
    """Run the exponential, cancellation and Young checks on fresh random batches."""
    reports = []
    exp_res = [check_exp_inequality(random_config(rng, p=p, gamma=0.0)) for _ in range(samples)]
    reports.append(CertificationReport(
        "exponential_moment", samples, sum(not r.holds for r in exp_res),
        max(r.lhs - r.rhs for r in exp_res)))
    canc = [check_cancellation(random_config(rng, p=p, gamma=float(rng.choice([0.0, 1.0, 2.0]))))
            for _ in range(samples)]
    reports.append(CertificationReport(
        "cancellation", samples, sum(not h for _, _, h in canc),
        max(abs(r) - 1e-9 * s for r, s, _ in canc),
        extra={"max_relative_residual": max(abs(r) / s if s > 0 else 0.0 for r, s, _ in canc)}))
    young_cfgs = [random_config(rng, p=p, gamma=float(rng.uniform(1e-3, 2.0))) for _ in range(samples)]
    reports.append(CertificationReport(
        "young", samples, sum(not check_young(cs) for cs in young_cfgs),
        max(young_margin(cs) for cs in young_cfgs)))
    return reports


def certify_calibrated(rng: np.random.Generator, samples: int, *, p: float, gamma: float,
                       safety: float = 10.0) -> list:
    """Calibrate C on one batch, then verify the drift and absolute estimates on a fresh one."""
    reports = []
    for name, lhs_fn, unit_fn in (("drift", drift_lhs, drift_unit_rhs),
                                  ("absolute_moment", abs_lhs, abs_unit_rhs)):
        calib = [random_config(rng, p=p, gamma=gamma) for _ in range(samples)]
        C = calibrate(lhs_fn, unit_fn, calib, safety)
        fresh = [random_config(rng, p=p, gamma=gamma) for _ in range(samples)]
        lhs = np.array([lhs_fn(cs) for cs in fresh])
        rhs = C * np.array([unit_fn(cs) for cs in fresh])
        reports.append(CertificationReport(
            name, samples, int(np.sum(lhs > rhs)), float(np.max(lhs - rhs)), C,
            extra={"p": p, "gamma": gamma, "max_ratio_fresh": float(np.max(lhs / rhs)) if C > 0 else None}))
    return reports
