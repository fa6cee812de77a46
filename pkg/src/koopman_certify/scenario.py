"""Bundles of system, domain, dictionary and control used by certification and sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dictionary import Dictionary
from .dynamics import ControlAffineSystem, ControlSignal, StateDomain


@dataclass(frozen=True)
class Scenario:
    system: ControlAffineSystem
    domain: StateDomain
    dictionary: Dictionary
    x0: np.ndarray
    T: float = 1.0
    dt: float = 1e-3
    control: Optional[ControlSignal] = None
    constraints: tuple = ()
    m: int = 100
    shared_samples: bool = False
    quadrature_order: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
