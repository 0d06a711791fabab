"""Initial phase-space laws: products of a position law and a velocity law."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Law:
    """A law on R^d from a small closed family.

    Parameters broadcast over the d coordinates, so ``Law.gaussian(0, 1)``
    is the standard normal in any dimension.
    """

    family: str
    a: tuple = (0.0,)
    b: tuple = (1.0,)
    components: tuple = ()
    weights: tuple = ()

    @classmethod
    def gaussian(cls, mean=0.0, std=1.0) -> "Law":
        return cls("gaussian", tuple(np.atleast_1d(mean).astype(float)), tuple(np.atleast_1d(std).astype(float)))

    @classmethod
    def uniform_box(cls, low=-1.0, high=1.0) -> "Law":
        return cls("uniform_box", tuple(np.atleast_1d(low).astype(float)), tuple(np.atleast_1d(high).astype(float)))

    @classmethod
    def point(cls, value=0.0) -> "Law":
        return cls("point", tuple(np.atleast_1d(value).astype(float)), ())

    @classmethod
    def mixture(cls, components: Sequence["Law"], weights: Sequence[float]) -> "Law":
        w = np.asarray(weights, dtype=float)
        if len(components) != len(w) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("mixture needs one nonnegative weight per component, summing to 1")
        return cls("mixture", components=tuple(components), weights=tuple(w))

    def __post_init__(self):
        if self.family not in ("gaussian", "uniform_box", "point", "mixture"):
            raise ValueError(f"unknown law family {self.family!r}")
        if self.family == "gaussian" and np.any(np.asarray(self.b) < 0):
            raise ValueError("gaussian std must be nonnegative")
        if self.family == "uniform_box" and np.any(np.asarray(self.b) < np.asarray(self.a)):
            raise ValueError("uniform_box needs high >= low")

    def sample(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        if self.family == "mixture":
            idx = rng.choice(len(self.components), size=n, p=np.asarray(self.weights))
            out = np.empty((n, d))
            for c, comp in enumerate(self.components):
                sel = idx == c
                out[sel] = comp.sample(rng, int(sel.sum()), d)
            return out
        a = np.broadcast_to(np.asarray(self.a), (d,))
        if self.family == "point":
            return np.tile(a, (n, 1))
        b = np.broadcast_to(np.asarray(self.b), (d,))
        if self.family == "gaussian":
            return a + b * rng.standard_normal((n, d))
        return a + (b - a) * rng.random((n, d))


@dataclass(frozen=True)
class ProductLaw:
    """mu0 = position law (x) velocity law, drawn i.i.d. for N particles."""

    position: Law
    velocity: Law
    N: int
    d: int

    def sample_arrays(self, rng: np.random.Generator, n: int | None = None):
        n = self.N if n is None else n
        r = self.position.sample(rng, n, self.d)
        v = self.velocity.sample(rng, n, self.d)
        return r, v

    def __call__(self, rng: np.random.Generator):
        from .particles import ParticleState

        r, v = self.sample_arrays(rng)
        return ParticleState(0.0, r, v)

    def with_n(self, N: int) -> "ProductLaw":
        return ProductLaw(self.position, self.velocity, N, self.d)
