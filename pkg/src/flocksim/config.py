"""Experiment configuration: TOML files validated against a strict schema."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import List, Literal, Optional, Union

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .kernels import KernelSet, NoiseDensity, PsiKernel, SigmaKernel
from .laws import Law, ProductLaw
from .particles import SimConfig

TASKS = (
    "simulate-particles", "simulate-ode", "meanfield-picard", "meanfield-direct",
    "chaos-study", "metrics", "verify-bounds", "certify-inequalities",
)
STOCHASTIC_TASKS = {"simulate-particles", "meanfield-picard", "meanfield-direct", "chaos-study", "metrics",
                    "verify-bounds", "certify-inequalities"}

Vec = Union[float, List[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PsiSpec(_Strict):
    family: Literal["constant", "rational"] = "constant"
    c: float = 1.0
    a_coef: float = 1.0
    b_exp: float = 1.0

    def build(self) -> PsiKernel:
        if self.family == "constant":
            return PsiKernel.constant(self.c)
        return PsiKernel.rational(self.a_coef, self.b_exp)


class SigmaSpec(_Strict):
    family: Literal["constant", "bracket_power"] = "constant"
    c: float = 1.0
    c_sigma: float = 1.0
    gamma: float = 0.0

    def build(self) -> SigmaKernel:
        if self.family == "constant":
            return SigmaKernel.constant(self.c)
        return SigmaKernel.bracket_power(self.c_sigma, self.gamma)


class NoiseSpec(_Strict):
    family: Literal["gaussian", "uniform_ball", "symmetric_discrete", "degenerate_zero"] = "gaussian"
    variances: Vec = 1.0
    radius: float = 1.0
    u0: Vec = 1.0

    def build(self, d: int) -> NoiseDensity:
        if self.family == "gaussian":
            return NoiseDensity.gaussian(d, self.variances)
        if self.family == "uniform_ball":
            return NoiseDensity.uniform_ball(d, self.radius)
        if self.family == "symmetric_discrete":
            u0 = [self.u0] * d if isinstance(self.u0, (int, float)) else self.u0
            if len(u0) != d:
                raise ValueError("noise.u0 must have d components")
            return NoiseDensity.symmetric_discrete(u0)
        return NoiseDensity.degenerate_zero(d)


class LawSpec(_Strict):
    family: Literal["gaussian", "uniform_box", "point"] = "gaussian"
    mean: Vec = 0.0
    std: Vec = 1.0
    low: Vec = -1.0
    high: Vec = 1.0
    value: Vec = 0.0

    def build(self) -> Law:
        if self.family == "gaussian":
            return Law.gaussian(self.mean, self.std)
        if self.family == "uniform_box":
            return Law.uniform_box(self.low, self.high)
        return Law.point(self.value)


class Mu0Spec(_Strict):
    position: LawSpec = Field(default_factory=LawSpec)
    velocity: LawSpec = Field(default_factory=LawSpec)


class ModelSpec(_Strict):
    N: int = Field(2, ge=1)
    d: int = Field(1, ge=1)
    psi: PsiSpec = Field(default_factory=PsiSpec)
    sigma: SigmaSpec = Field(default_factory=SigmaSpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    mu0: Mu0Spec = Field(default_factory=Mu0Spec)


class RunSpec(_Strict):
    t_end: float = Field(1.0, gt=0)
    output_times: List[float] = Field(default_factory=lambda: [0.0, 1.0])
    seed: Optional[int] = Field(None, ge=0, lt=2**64)
    replicas: int = Field(1, ge=1)
    truncation_m: Optional[float] = Field(None, gt=0)
    record_jump_log: bool = False
    exclude_diagonal: bool = False
    majorant: Literal["global", "velocity"] = "global"
    dt: float = Field(1e-3, gt=0)            # ODE step
    save_every: int = Field(1, ge=1)         # ODE snapshot stride


class MeanFieldSpec(_Strict):
    M: int = Field(1000, ge=2)
    max_iter: int = Field(10, ge=1)
    tol: float = Field(0.05, gt=0)
    grid_dt: Optional[float] = Field(None, gt=0)
    N_list: List[int] = Field(default_factory=lambda: [8, 32, 128])
    M_ref: int = Field(1024, ge=2)
    tagged_replicas: int = Field(200, ge=2)
    bootstrap: int = Field(20, ge=2)


class MetricsSpec(_Strict):
    """Which functionals to evaluate on a particle run (``metrics`` task)."""
    moments: List[float] = Field(default_factory=lambda: [2.0, 4.0])
    exp_delta: Optional[float] = Field(None, gt=0)
    exp_kappa: float = Field(1.0, gt=0, le=1)


class BoundsSpec(_Strict):
    p: float = Field(2.0, ge=2)
    safety: float = Field(10.0, ge=1)
    # dimensionless envelope constant; the envelope uses C * psi_max * c_sigma.
    # Calibrated on the run itself when unset.
    C: Optional[float] = Field(None, ge=0)


class CertifySpec(_Strict):
    samples: int = Field(10_000, ge=1)
    p_list: List[float] = Field(default_factory=lambda: [2.0, 3.0])
    gamma_list: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0])
    safety: float = Field(10.0, ge=1)


class ExperimentConfig(_Strict):
    task: Literal[TASKS]  # type: ignore[valid-type]
    model: ModelSpec = Field(default_factory=ModelSpec)
    run: RunSpec = Field(default_factory=RunSpec)
    meanfield: MeanFieldSpec = Field(default_factory=MeanFieldSpec)
    metrics: MetricsSpec = Field(default_factory=MetricsSpec)
    bounds: BoundsSpec = Field(default_factory=BoundsSpec)
    certify: CertifySpec = Field(default_factory=CertifySpec)

    @model_validator(mode="after")
    def _check(self):
        if self.task in STOCHASTIC_TASKS and self.run.seed is None:
            raise ValueError(f"task {self.task!r} needs run.seed")
        times = self.run.output_times
        if sorted(times) != times or (times and (times[0] < 0 or times[-1] > self.run.t_end)):
            raise ValueError("run.output_times must be sorted and lie in [0, t_end]")
        if self.model.sigma.family == "bracket_power" and self.model.sigma.gamma > 0 \
                and self.run.truncation_m is None and self.run.majorant == "global" \
                and self.task in ("simulate-particles", "meanfield-direct", "chaos-study", "verify-bounds"):
            raise ValueError("sigma with gamma > 0 needs run.truncation_m or run.majorant = 'velocity'")
        return self

    # -- builders ------------------------------------------------------------

    def kernel_set(self) -> KernelSet:
        m = self.model
        return KernelSet(m.psi.build(), m.sigma.build(), m.noise.build(m.d))

    def mu0(self) -> ProductLaw:
        m = self.model
        return ProductLaw(m.mu0.position.build(), m.mu0.velocity.build(), m.N, m.d)

    def sim_config(self) -> SimConfig:
        r = self.run
        return SimConfig(r.t_end, tuple(r.output_times), r.seed or 0, r.truncation_m,
                         r.record_jump_log, r.exclude_diagonal, r.majorant)


class ConfigError(ValueError):
    """The configuration file or an override does not match the schema."""


def _parse_value(text: str):
    """Parse an override value as a TOML value, falling back to a bare string."""
    try:
        return tomli.loads(f"x = {text}")["x"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides to a nested dict (returns a copy)."""
    out = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
        node[parts[-1]] = _parse_value(text.strip())
    return out


def load_config(path, overrides=(), *, default_task: Optional[str] = None) -> ExperimentConfig:
    """Read a TOML config, apply overrides and validate.

    ``default_task`` fills in ``task`` when the file does not declare one.
    """
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if default_task is not None:
        data.setdefault("task", default_task)
    return config_from_dict(apply_overrides(data, overrides))


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except Exception as exc:  # pydantic.ValidationError or a kernel ValueError
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig, path: Path) -> None:
    """Write the fully resolved config; loading it back reproduces the run."""
    data = cfg.model_dump(exclude_none=True)
    with open(path, "wb") as fh:
        tomli_w.dump(data, fh)
