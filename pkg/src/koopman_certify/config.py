"""JSON run configuration: schema, loading and construction of library objects."""

from __future__ import annotations

import hashlib
import json
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .dictionary import FemMesh, Observable, composite_dictionary, fem_dictionary, monomial_dictionary
from .dynamics import BUILTIN_SYSTEMS, ControlSignal, StateDomain
from .errors import UsageError


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemBlock(_Block):
    name: str = "duffing"
    params: dict = {}

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in BUILTIN_SYSTEMS:
            raise ValueError(f"unknown system {v!r}; choose from {sorted(BUILTIN_SYSTEMS)}")
        return v


class DomainBlock(_Block):
    lower: List[float]
    upper: List[float]

    @model_validator(mode="after")
    def _box(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower and upper must have the same positive length")
        if any(h <= l for l, h in zip(self.lower, self.upper)):
            raise ValueError("upper must exceed lower on every axis")
        return self


class ConstraintBlock(_Block):
    expr: str
    label: Optional[str] = None


class ControlBlock(_Block):
    kind: Literal["zero", "constant", "zoh"] = "zoh"
    value: Optional[List[float]] = None
    segment: float = 0.1
    lower: float = -1.0
    upper: float = 1.0
    seed: Optional[int] = None
    max_redraws: int = 1000

    @model_validator(mode="after")
    def _check(self):
        if self.segment <= 0:
            raise ValueError("segment must be > 0")
        if self.upper < self.lower:
            raise ValueError("control upper bound is below the lower bound")
        if self.kind == "constant" and self.value is None:
            raise ValueError("a constant control needs 'value'")
        return self


class ScenarioBlock(_Block):
    system: SystemBlock = SystemBlock()
    domain: DomainBlock = DomainBlock(lower=[-2.0, -2.0], upper=[2.0, 2.0])
    constraints: List[ConstraintBlock] = []
    x0: List[float] = [1.0, 1.0]
    T: float = 1.0
    dt: float = 1e-3
    control: ControlBlock = ControlBlock()
    observable: str = "x1"

    @field_validator("T", "dt")
    @classmethod
    def _positive(cls, v, info):
        if not v > 0:
            raise ValueError(f"{info.field_name} must be > 0")
        return v


class DictionaryBlock(_Block):
    kind: Literal["monomial", "fem"] = "monomial"
    degree: Optional[int] = 5
    dx: Optional[float] = None
    include_constraints: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "monomial" and (self.degree is None or self.degree < 0):
            raise ValueError("monomial dictionaries need degree >= 0")
        if self.kind == "fem" and (self.dx is None or not self.dx > 0):
            raise ValueError("fem dictionaries need dx > 0")
        return self


class DataBlock(_Block):
    m: int = 100
    seed: int = 0
    seeds: List[int] = list(range(20))
    trials: int = 1
    shared_samples: bool = False
    edmdc_interval: float = 0.01

    @field_validator("m")
    @classmethod
    def _m(cls, v):
        if v < 1:
            raise ValueError("m must be ≥ 1")
        return v

    @field_validator("trials")
    @classmethod
    def _trials(cls, v):
        if v < 1:
            raise ValueError("trials must be ≥ 1")
        return v

    @field_validator("edmdc_interval")
    @classmethod
    def _interval(cls, v):
        if not v > 0:
            raise ValueError("edmdc_interval must be > 0")
        return v


class CertificationBlock(_Block):
    epsilon: float = 0.05
    delta: float = 0.05
    dt_check: Optional[float] = None

    @field_validator("epsilon")
    @classmethod
    def _eps(cls, v):
        if not v > 0:
            raise ValueError("epsilon must be > 0")
        return v

    @field_validator("delta")
    @classmethod
    def _delta(cls, v):
        if not 0 < v < 1:
            raise ValueError("delta must lie in (0, 1)")
        return v

    @field_validator("dt_check")
    @classmethod
    def _dtc(cls, v):
        if v is not None and not v > 0:
            raise ValueError("dt_check must be > 0")
        return v


class SweepBlock(_Block):
    kind: Literal["generator", "trajectory", "fem", "duffing"] = "generator"
    m_values: List[int] = [100, 1000, 10000]
    epsilons: List[float] = []
    mesh_sizes: List[float] = []

    @field_validator("m_values")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("m_values must be strictly increasing")
        if v and v[0] < 1:
            raise ValueError("m must be ≥ 1")
        return v


class OutputBlock(_Block):
    directory: str = "out"
    formats: List[Literal["csv", "json", "svg"]] = ["csv", "json"]


class RunConfig(_Block):
    scenario: ScenarioBlock = ScenarioBlock()
    dictionary: DictionaryBlock = DictionaryBlock()
    data: DataBlock = DataBlock()
    certification: CertificationBlock = CertificationBlock()
    sweep: SweepBlock = SweepBlock()
    output: OutputBlock = OutputBlock()

    @model_validator(mode="after")
    def _dims(self):
        d = len(self.scenario.domain.lower)
        if len(self.scenario.x0) != d:
            raise ValueError(f"scenario.x0 has length {len(self.scenario.x0)}, domain has dimension {d}")
        return self

    def config_hash(self) -> str:
        """Hash of everything that affects numbers (the output block is excluded)."""
        payload = self.model_dump(exclude={"output"})
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            msg = err["msg"].removeprefix("Value error, ")
            msgs.append(f"{loc}: {msg}")
        raise UsageError(f"{source}: " + "; ".join(msgs)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


# --------------------------------------------------------------- construction


def build_system(cfg: RunConfig):
    sb = cfg.scenario.system
    try:
        system = BUILTIN_SYSTEMS[sb.name](**sb.params)
    except TypeError as exc:
        raise UsageError(f"scenario.system.params: {exc}") from None
    if system.state_dim != len(cfg.scenario.domain.lower):
        raise UsageError(f"system {sb.name!r} has state dimension {system.state_dim}, "
                         f"domain has {len(cfg.scenario.domain.lower)}")
    return system


def build_domain(cfg: RunConfig) -> StateDomain:
    return StateDomain(np.array(cfg.scenario.domain.lower), np.array(cfg.scenario.domain.upper))


def build_constraints(cfg: RunConfig) -> list:
    d = len(cfg.scenario.domain.lower)
    return [Observable.from_expression(c.expr, d, c.label) for c in cfg.scenario.constraints]


def build_observable(cfg: RunConfig) -> Observable:
    return Observable.from_expression(cfg.scenario.observable, len(cfg.scenario.domain.lower))


def build_dictionary(cfg: RunConfig, constraints=None):
    db = cfg.dictionary
    dom = cfg.scenario.domain
    d = len(dom.lower)
    if db.kind == "monomial":
        base = monomial_dictionary(d, db.degree)
    else:
        base = fem_dictionary(FemMesh(np.array(dom.lower), np.array(dom.upper), db.dx))
    if db.include_constraints:
        constraints = build_constraints(cfg) if constraints is None else constraints
        return composite_dictionary(constraints, base, dom.lower, dom.upper)
    return base


def build_control(cfg: RunConfig, system):
    """The configured control; random ZOH draws are redrawn until the true
    trajectory exists on [0, T]. Returns (control, redraws)."""
    from .experiments import admissible_control

    cb = cfg.scenario.control
    n_c = system.control_dim
    if cb.kind == "zero":
        return ControlSignal.constant(np.zeros(n_c)), 0
    if cb.kind == "constant":
        if len(cb.value) != n_c:
            raise UsageError(f"scenario.control.value needs {n_c} entries")
        return ControlSignal.constant(cb.value, cb.lower, cb.upper), 0
    seed = cfg.data.seed if cb.seed is None else cb.seed
    u, _, redraws = admissible_control(system, np.array(cfg.scenario.x0), cfg.scenario.T, cfg.scenario.dt, seed,
                                       cb.segment, cb.lower, cb.upper, cb.max_redraws)
    return u, redraws
