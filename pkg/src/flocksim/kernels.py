"""Communication rate, velocity kernel and noise law of the stochastic model.

All kernels are immutable and vectorised over the last axis: ``psi(r)`` with
``r`` of shape ``(..., d)`` returns an array of shape ``(...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special, stats


def bracket(u) -> np.ndarray:
    """Japanese bracket (1 + |u|^2)^(1/2) over the last axis."""
    u = np.asarray(u, dtype=float)
    return np.sqrt(1.0 + np.sum(u * u, axis=-1))


def _sqnorm(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.sum(x * x, axis=-1)


@dataclass(frozen=True)
class PsiKernel:
    """Bounded symmetric communication rate.

    ``constant``: psi(r) = c.  ``rational``: psi(r) = a / (1 + |r|^2)^(b/2).
    """

    family: str
    c: float = 0.0
    a_coef: float = 0.0
    b_exp: float = 0.0

    def __post_init__(self):
        if self.family == "constant":
            if not self.c >= 0:
                raise ValueError("constant psi needs c >= 0")
        elif self.family == "rational":
            if not (self.a_coef > 0 and self.b_exp > 0):
                raise ValueError("rational psi needs a_coef > 0 and b_exp > 0")
        else:
            raise ValueError(f"unknown psi family {self.family!r}")

    @classmethod
    def constant(cls, c: float) -> "PsiKernel":
        return cls("constant", c=float(c))

    @classmethod
    def rational(cls, a_coef: float, b_exp: float) -> "PsiKernel":
        return cls("rational", a_coef=float(a_coef), b_exp=float(b_exp))

    @property
    def psi_max(self) -> float:
        return self.c if self.family == "constant" else self.a_coef

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.family == "constant":
            return np.full(r.shape[:-1], self.c)
        return self.a_coef * (1.0 + _sqnorm(r)) ** (-0.5 * self.b_exp)


@dataclass(frozen=True)
class SigmaKernel:
    """Symmetric velocity kernel with growth sigma(u) <= c_sigma <u>^gamma.

    ``constant`` is the gamma = 0 family (``c`` may be 0 for a frozen system);
    ``bracket_power`` is sigma(u) = c_sigma <u>^gamma with gamma in [0, 2].
    """

    family: str
    c: float = 0.0
    c_sigma: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.family == "constant":
            if not self.c >= 0:
                raise ValueError("constant sigma needs c >= 0")
        elif self.family == "bracket_power":
            if not self.c_sigma > 0:
                raise ValueError("bracket_power sigma needs c_sigma > 0")
            if not 0.0 <= self.gamma <= 2.0:
                raise ValueError("gamma must lie in [0, 2]")
        else:
            raise ValueError(f"unknown sigma family {self.family!r}")

    @classmethod
    def constant(cls, c: float) -> "SigmaKernel":
        return cls("constant", c=float(c))

    @classmethod
    def bracket_power(cls, c_sigma: float, gamma: float) -> "SigmaKernel":
        return cls("bracket_power", c_sigma=float(c_sigma), gamma=float(gamma))

    @property
    def growth_constant(self) -> float:
        """The c_sigma of the growth condition."""
        return self.c if self.family == "constant" else self.c_sigma

    @property
    def exponent(self) -> float:
        return 0.0 if self.family == "constant" else self.gamma

    @property
    def is_constant(self) -> bool:
        return self.exponent == 0.0

    @property
    def sup(self) -> float:
        """Sup norm; infinite when gamma > 0."""
        return self.growth_constant if self.is_constant else math.inf

    def bound(self, speed_sq_max: float) -> float:
        """Upper bound of sigma(u) over |u|^2 <= speed_sq_max."""
        if self.is_constant:
            return self.growth_constant
        return self.c_sigma * (1.0 + speed_sq_max) ** (0.5 * self.gamma)

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.family == "constant":
            return np.full(u.shape[:-1], self.c)
        if self.gamma == 0.0:
            return np.full(u.shape[:-1], self.c_sigma)
        return self.c_sigma * (1.0 + _sqnorm(u)) ** (0.5 * self.gamma)


def _quadratic_form_moment(variances: np.ndarray, n: int) -> float:
    """E[(sum_i s_i Z_i^2)^n] for integer n via the cumulant recursion."""
    kappa = [0.0] + [
        2.0 ** (r - 1) * math.factorial(r - 1) * float(np.sum(variances**r)) for r in range(1, n + 1)
    ]
    m = [1.0]
    for k in range(1, n + 1):
        m.append(sum(math.comb(k - 1, r - 1) * kappa[r] * m[k - r] for r in range(1, k + 1)))
    return m[n]


def _gaussian_abs_moment(variances: np.ndarray, p: float) -> float:
    """E|u|^(2p) for u ~ N(0, diag(variances)) by 1-d adaptive quadrature.

    Writes p = n + f with integer n and f in [0, 1) and uses
    x^f = f / Gamma(1 - f) * int_0^inf (1 - e^{-s x}) s^{-1-f} ds; the tilted
    moments E[X^n e^{-sX}] are again quadratic-form moments.
    """
    n = int(math.floor(p))
    f = p - n
    base = _quadratic_form_moment(variances, n)
    if f == 0.0:
        return base

    def gap(s: float) -> float:
        scale = 1.0 + 2.0 * s * variances
        laplace = float(np.prod(scale ** -0.5))
        return base - laplace * _quadratic_form_moment(variances / scale, n)

    slope0 = _quadratic_form_moment(variances, n + 1)  # lim gap(s)/s as s -> 0

    # the s^{-f} endpoint singularity goes into QUADPACK's algebraic weight
    head, _ = integrate.quad(lambda s: gap(s) / s if s > 0 else slope0, 0.0, 1.0,
                             weight="alg", wvar=(-f, 0.0),
                             epsabs=0.0, epsrel=1e-10, limit=200)
    tail, _ = integrate.quad(lambda s: gap(s) * s ** (-1.0 - f), 1.0, np.inf,
                             epsabs=0.0, epsrel=1e-10, limit=200)
    return f / special.gamma(1.0 - f) * (head + tail)


@dataclass(frozen=True)
class NoiseDensity:
    """Symmetric noise law a(u) on R^d.

    ``symmetric_discrete`` (mass 1/2 at +-u0) and ``degenerate_zero`` are not
    densities; they are kept because every u-integral becomes a finite sum.
    """

    family: str
    d: int
    variances: tuple = ()
    radius: float = 0.0
    u0: tuple = ()
    _std: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        std = np.zeros(self.d)
        if self.family == "gaussian":
            var = np.broadcast_to(np.asarray(self.variances, dtype=float), (self.d,))
            if np.any(var <= 0):
                raise ValueError("gaussian variances must be positive")
            object.__setattr__(self, "variances", tuple(float(x) for x in var))
            std = np.sqrt(var)
        elif self.family == "uniform_ball":
            if not self.radius > 0:
                raise ValueError("uniform_ball radius must be positive")
        elif self.family == "symmetric_discrete":
            u0 = np.broadcast_to(np.asarray(self.u0, dtype=float), (self.d,))
            object.__setattr__(self, "u0", tuple(float(x) for x in u0))
        elif self.family != "degenerate_zero":
            raise ValueError(f"unknown noise family {self.family!r}")
        object.__setattr__(self, "_std", std)

    @classmethod
    def gaussian(cls, d: int, variances=1.0) -> "NoiseDensity":
        return cls("gaussian", d, variances=tuple(np.broadcast_to(np.asarray(variances, float), (d,))))

    @classmethod
    def uniform_ball(cls, d: int, radius: float) -> "NoiseDensity":
        return cls("uniform_ball", d, radius=float(radius))

    @classmethod
    def symmetric_discrete(cls, u0: Sequence[float]) -> "NoiseDensity":
        u0 = tuple(float(x) for x in np.atleast_1d(u0))
        return cls("symmetric_discrete", len(u0), u0=u0)

    @classmethod
    def degenerate_zero(cls, d: int) -> "NoiseDensity":
        return cls("degenerate_zero", d)

    @property
    def is_density(self) -> bool:
        return self.family in ("gaussian", "uniform_ball")

    @property
    def is_isotropic(self) -> bool:
        return self.family != "gaussian" or len(set(self.variances)) == 1

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        shape = (self.d,) if size is None else (size, self.d)
        if self.family == "gaussian":
            return rng.standard_normal(shape) * self._std
        if self.family == "uniform_ball":
            z = rng.standard_normal(shape)
            z /= np.linalg.norm(z, axis=-1, keepdims=True)
            rad = self.radius * rng.random(shape[:-1]) ** (1.0 / self.d)
            return z * np.asarray(rad)[..., None]
        if self.family == "symmetric_discrete":
            sign = np.where(rng.random(shape[:-1]) < 0.5, -1.0, 1.0)
            return np.asarray(sign)[..., None] * np.asarray(self.u0)
        return np.zeros(shape)

    def moment(self, p: float) -> float:
        """lambda_{2p} = int |u|^{2p} a(u) du."""
        if p < 0:
            raise ValueError("moment order p must be >= 0")
        if p == 0:
            return 1.0
        if self.family == "degenerate_zero":
            return 0.0
        if self.family == "symmetric_discrete":
            return float(np.sum(np.square(self.u0))) ** p
        if self.family == "uniform_ball":
            return self.d * self.radius ** (2 * p) / (self.d + 2 * p)
        return _gaussian_abs_moment(np.asarray(self.variances), p)

    def exp_moment(self, delta: float, kappa: float) -> float:
        """c(delta, kappa) = int exp(delta |u|^kappa) a(u) du."""
        if self.family == "degenerate_zero":
            return 1.0
        if self.family == "symmetric_discrete":
            return math.exp(delta * math.sqrt(sum(x * x for x in self.u0)) ** kappa)
        if self.family == "uniform_ball":
            R, d = self.radius, self.d
            val, _ = integrate.quad(lambda r: math.exp(delta * r**kappa) * d * r ** (d - 1) / R**d,
                                    0.0, R, epsabs=0.0, epsrel=1e-10)
            return val
        if not self.is_isotropic:
            raise ValueError("exponential moment needs an isotropic gaussian")
        if kappa > 2 or (kappa == 2 and delta * self.variances[0] >= 0.5):
            return math.inf
        s = math.sqrt(self.variances[0])
        chi = stats.chi(self.d)
        val, _ = integrate.quad(lambda x: math.exp(delta * (s * x) ** kappa) * chi.pdf(x),
                                0.0, np.inf, epsabs=0.0, epsrel=1e-10, limit=200)
        return val


@dataclass(frozen=True)
class KernelSet:
    """The triple (psi, sigma, a) driving the jump dynamics."""

    psi: PsiKernel
    sigma: SigmaKernel
    noise: NoiseDensity

    @property
    def d(self) -> int:
        return self.noise.d

    @property
    def gamma(self) -> float:
        return self.sigma.exponent

    def pair_rate(self, x_k, x_j) -> float:
        """psi(r_k - r_j) sigma(v_k - v_j) for phase points x = (r, v)."""
        (rk, vk), (rj, vj) = x_k, x_j
        dr = np.asarray(rk, float) - np.asarray(rj, float)
        dv = np.asarray(vk, float) - np.asarray(vj, float)
        return float(self.psi(dr) * self.sigma(dv))

    def flags(self) -> dict:
        """Model-condition flags worth surfacing in run reports."""
        return {
            "noise_is_density": self.noise.is_density,
            "sigma_bounded": self.sigma.is_constant,
            "gamma": self.gamma,
        }
