"""Tightened constraint checks on the surrogate and their ground-truth validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dictionary import ObservableCoeffs, project
from .dynamics import integrate, time_grid
from .edmd import fit_controls
from .errors import DivergenceError, KoopmanError, UsageError
from .seeding import subseed
from .stats import wilson_interval
from .surrogate import BilinearSurrogate, assemble_surrogate, propagate


@dataclass(frozen=True)
class ConstraintSet:
    """State constraints h_j(x) <= 0."""

    constraints: tuple

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.constraints:
            raise UsageError("a constraint set needs at least one constraint")
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise UsageError("constraint labels must be unique")

    @property
    def labels(self):
        return [c.label for c in self.constraints]

    def __len__(self):
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)


@dataclass(frozen=True)
class CertificationConfig:
    epsilon: float
    delta: float = 0.05
    T: float = 1.0
    dt: float = 1e-3
    dt_check: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise UsageError("epsilon must be > 0 (the tightening has to be strict)")
        if not 0 < self.delta < 1:
            raise UsageError("delta must lie in (0, 1)")
        if self.dt_check is not None and not self.dt_check > 0:
            raise UsageError("dt_check must be > 0")
        if not self.dt > 0 or not self.T > 0:
            raise UsageError("T and dt must be > 0")

    @property
    def check_step(self):
        return self.dt if self.dt_check is None else self.dt_check

    def check_times(self):
        return time_grid(self.T, self.check_step)


@dataclass(frozen=True)
class ConstraintVerdict:
    label: str
    certified: bool
    worst_margin: float
    first_failure_time: Optional[float] = None
    failure_margin: Optional[float] = None
    reason: Optional[str] = None
    representation: str = "exact"
    projection_residual: float = 0.0

    @property
    def verdict(self):
        return "certified" if self.certified else "rejected"


@dataclass(frozen=True)
class Certificate:
    verdicts: tuple
    epsilon: float
    delta: float
    grid: dict
    metadata: dict = field(default_factory=dict)

    @property
    def all_certified(self):
        return all(v.certified for v in self.verdicts)

    def to_dict(self):
        """JSON-ready form; field names are part of the CLI contract."""
        return {
            "all_certified": self.all_certified,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "grid": self.grid,
            "constraints": [
                {
                    "constraint": v.label,
                    "verdict": v.verdict,
                    "worst_margin": v.worst_margin,
                    "first_failure_time": v.first_failure_time,
                    "failure_margin": v.failure_margin,
                    "reason": v.reason,
                    "representation": v.representation,
                    "projection_residual": v.projection_residual,
                }
                for v in self.verdicts
            ],
            "provenance": self.metadata,
        }


def constraint_coefficients(constraints, dictionary, lower, upper, q=None) -> list:
    """Unit vectors for constraints that are dictionary elements, L2
    projections otherwise.

    A constraint counts as a dictionary element when it was added to the
    dictionary as a function observable, or when its expression is literally
    the label of a dictionary element (e.g. "x1" in a monomial dictionary).
    The returned coefficients keep the constraint's own label.
    """
    out = []
    members = {id(o.value): o.label for o in dictionary.function_observables}
    labels = set(dictionary.labels)
    for h in constraints:
        expr = getattr(h, "expression", None)
        if id(h.value) in members:
            unit = ObservableCoeffs.unit(dictionary, members[id(h.value)])
            out.append(ObservableCoeffs(unit.coeffs, dictionary, h.label, exact=True))
        elif expr is not None and expr == h.label and expr in labels:
            out.append(ObservableCoeffs.unit(dictionary, h.label))
        else:
            out.append(project(dictionary, h, lower, upper, q))
    return out


def _on_grid(times, values, check_times):
    return np.interp(check_times, times, values, left=np.nan, right=np.nan)


def judge(label, check_times, predicted, epsilon, diverged_at=None, representation="exact", residual=0.0):
    """Verdict for one predicted constraint series on the check grid."""
    margins = -epsilon - predicted
    finite = np.isfinite(margins)
    fails = np.flatnonzero(~finite | (margins < 0))
    worst = float(np.min(margins[finite])) if finite.any() else float("-inf")
    if fails.size == 0:
        return ConstraintVerdict(label, True, worst, representation=representation, projection_residual=residual)
    k = int(fails[0])
    if not finite[k]:
        t = diverged_at if diverged_at is not None else float(check_times[k])
        return ConstraintVerdict(label, False, worst, t, None, "divergence", representation, residual)
    return ConstraintVerdict(label, False, worst, float(check_times[k]), float(margins[k]), "tightened",
                             representation, residual)


def predict_constraints(s: BilinearSurrogate, constraint_coeffs, x0, u, cfg: CertificationConfig):
    """Surrogate predictions of every constraint on the check grid.

    One lifted trajectory serves all constraints. Returns
    ``(check_times, values (K, p), diverged_at)``; values are NaN after a
    divergence.
    """
    if s.dictionary is None:
        raise UsageError("surrogate has no dictionary attached")
    z0 = s.dictionary.evaluate(np.asarray(x0, dtype=float))
    traj = propagate(s, z0, u, cfg.T, cfg.dt)
    C = np.stack([c.coeffs for c in constraint_coeffs], axis=-1)
    fine = traj.padded() @ C
    check_times = cfg.check_times()
    vals = np.stack([_on_grid(traj.times, fine[:, j], check_times) for j in range(C.shape[1])], axis=-1)
    return check_times, vals, traj.diverged_at


def certify(s: BilinearSurrogate, constraint_coeffs: Sequence[ObservableCoeffs], x0, u,
            cfg: CertificationConfig, metadata=None) -> Certificate:
    """Check h~_j(t) <= -epsilon on the check grid for every constraint.

    h~_j is propagated through the surrogate starting from (P_V h_j)(x0).
    """
    if not isinstance(cfg, CertificationConfig):
        raise UsageError("cfg must be a CertificationConfig")
    constraint_coeffs = list(constraint_coeffs)
    if not constraint_coeffs:
        raise UsageError("no constraints to certify")
    check_times, vals, diverged_at = predict_constraints(s, constraint_coeffs, x0, u, cfg)
    return _certificate(s, constraint_coeffs, check_times, vals, diverged_at, cfg, metadata)


def _certificate(s, constraint_coeffs, check_times, vals, diverged_at, cfg, metadata=None):
    verdicts = []
    for j, c in enumerate(constraint_coeffs):
        rep = "exact" if c.exact else "projected"
        verdicts.append(judge(c.label, check_times, vals[:, j], cfg.epsilon, diverged_at, rep, c.residual))
    meta = {"N": s.N, "dictionary": s.dictionary.kind if s.dictionary is not None else None}
    meta.update(s.provenance)
    meta.update(metadata or {})
    grid = {"T": cfg.T, "dt": cfg.dt, "dt_check": cfg.check_step, "points": int(len(check_times))}
    return Certificate(tuple(verdicts), cfg.epsilon, cfg.delta, grid, meta)


@dataclass(frozen=True)
class TruthReport:
    satisfied: bool
    time: Optional[float] = None
    index: Optional[int] = None
    value: Optional[float] = None
    diverged: bool = False
    times: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None  # (K+1, p) constraint values along the true trajectory


def validate_certificate(system, x0, u, constraints, T, dt=1e-3) -> TruthReport:
    """Integrate the true system and evaluate every h_j on the grid."""
    constraints = list(constraints)
    try:
        traj = integrate(system, x0, u, T, dt)
    except DivergenceError as exc:
        return TruthReport(False, exc.time, None, None, diverged=True)
    values = np.stack([np.asarray(h.value(traj.states), dtype=float) for h in constraints], axis=-1)
    viol = values > 0
    if not viol.any():
        return TruthReport(True, times=traj.times, values=values)
    k = int(np.flatnonzero(viol.any(axis=1))[0])
    j = int(np.flatnonzero(viol[k])[0])
    return TruthReport(False, float(traj.times[k]), j, float(values[k, j]), times=traj.times, values=values)


@dataclass(frozen=True)
class SoundnessReport:
    trials: int
    unsound_rate: float
    closeness_rate: float
    certified_rate: float
    implication_holds: int
    failed_trials: int
    rows: list
    closeness_interval: tuple = (0.0, 1.0)
    unsound_interval: tuple = (0.0, 1.0)


def soundness_trial(scenario, trials: int, cfg: CertificationConfig, master_seed=0) -> SoundnessReport:
    """Repeat (fit, certify, compare with truth) over independent data draws.

    Per trial: ``unsound`` = some constraint certified but violated by the
    true trajectory; ``close`` = |h_j(x(t)) - h~_j(t)| <= epsilon on the
    whole check grid for all j; ``implication`` = the arithmetic fact
    (tightened pass and close) => true feasibility, re-checked on the numbers.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    constraints = list(scenario.constraints)
    if not constraints:
        raise UsageError("scenario has no constraints")
    truth = validate_certificate(scenario.system, scenario.x0, scenario.control, constraints, cfg.T, cfg.dt)
    if truth.diverged:
        raise UsageError("scenario control is not admissible: the true trajectory diverges")
    check_times = cfg.check_times()
    true_vals = np.stack([_on_grid(truth.times, truth.values[:, j], check_times) for j in range(len(constraints))], -1)
    dom = scenario.domain
    coeffs = constraint_coefficients(constraints, scenario.dictionary, dom.lower, dom.upper, scenario.quadrature_order)

    rows = []
    for trial in range(trials):
        seed = subseed(master_seed, trial)
        row = {"trial": trial, "seed": seed}
        try:
            fits = fit_controls(scenario.dictionary, scenario.system, dom, scenario.m, seed, scenario.shared_samples)
            s = assemble_surrogate(fits, scenario.dictionary)
            _, preds, diverged_at = predict_constraints(s, coeffs, scenario.x0, scenario.control, cfg)
            cert = _certificate(s, coeffs, check_times, preds, diverged_at, cfg)
        except KoopmanError as exc:
            row.update(error=str(exc))
            rows.append(row)
            continue
        certified = np.array([v.certified for v in cert.verdicts])
        violated = np.any(true_vals > 0, axis=0)
        with np.errstate(invalid="ignore"):
            gap = np.abs(true_vals - preds)
            close_j = np.all(gap <= cfg.epsilon, axis=0)
            tightened_j = np.all(preds <= -cfg.epsilon, axis=0)
        feasible_j = np.all(true_vals <= 0, axis=0)
        implication = bool(np.all(~(tightened_j & close_j) | feasible_j))
        row.update(
            certified=certified.tolist(),
            violated=violated.tolist(),
            unsound=bool(np.any(certified & violated)),
            close=bool(np.all(close_j)),
            max_gap=float(np.nanmax(gap)) if np.isfinite(gap).any() else float("inf"),
            implication=implication,
        )
        rows.append(row)

    ok = [r for r in rows if "error" not in r]
    n = len(ok)
    unsound = sum(r["unsound"] for r in ok)
    close = sum(r["close"] for r in ok)
    cert_all = sum(all(r["certified"]) for r in ok)
    return SoundnessReport(
        trials=trials,
        unsound_rate=unsound / n if n else float("nan"),
        closeness_rate=close / n if n else float("nan"),
        certified_rate=cert_all / n if n else float("nan"),
        implication_holds=sum(r["implication"] for r in ok),
        failed_trials=trials - n,
        rows=rows,
        closeness_interval=wilson_interval(close, n) if n else (0.0, 1.0),
        unsound_interval=wilson_interval(unsound, n) if n else (0.0, 1.0),
    )
