"""Control-affine ODE systems, control signals, state domains and RK4 integration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DivergenceError, NumericalError, UsageError

VectorField = Callable[[np.ndarray], np.ndarray]

BLOWUP_STATE = 1e6
DEFAULT_DT = 1e-3
DEFAULT_SEGMENT = 0.1

# relative slack used when snapping grid times onto segment boundaries
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class ControlAffineSystem:
    """x' = f(x) + sum_i g_i(x) u_i.

    ``drift`` and every entry of ``control_fields`` map an array of shape
    ``(..., d)`` to an array of the same shape.
    """

    state_dim: int
    control_dim: int
    drift: VectorField
    control_fields: tuple = ()
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1:
            raise UsageError("state_dim must be >= 1")
        if self.control_dim < 0:
            raise UsageError("control_dim must be >= 0")
        if len(self.control_fields) != self.control_dim:
            raise UsageError(
                f"expected {self.control_dim} control fields, got {len(self.control_fields)}"
            )

    def rhs(self, x, u):
        """Vectorized right-hand side; ``u`` broadcasts against ``x[..., :1]``."""
        out = np.asarray(self.drift(x), dtype=float)
        if self.control_dim:
            u = np.asarray(u, dtype=float)
            for i, g in enumerate(self.control_fields):
                out = out + np.asarray(g(x), dtype=float) * u[..., i : i + 1]
        return out

    def frozen(self, u_const) -> "ControlAffineSystem":
        """Autonomous system with vector field f + sum_i g_i u_i for constant u."""
        u_const = _as_control(self, u_const)
        return ControlAffineSystem(
            self.state_dim,
            0,
            lambda x: self.rhs(x, u_const),
            (),
            name=f"{self.name}|u={u_const.tolist()}",
            params=dict(self.params),
        )

    def check_finite(self, points) -> None:
        """Raise NumericalError if f or some g_i is non-finite on ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        for label, fn in [("f", self.drift)] + [
            (f"g{i + 1}", g) for i, g in enumerate(self.control_fields)
        ]:
            vals = np.asarray(fn(pts), dtype=float)
            if not np.all(np.isfinite(vals)):
                bad = np.argwhere(~np.isfinite(vals))[0]
                raise NumericalError(f"{label} is not finite at {pts[bad[0]].tolist()}")


def duffing(alpha=-1.0, beta=1.0, delta=0.0) -> ControlAffineSystem:
    """Duffing oscillator with state-coupled control.

    x1' = x2,  x2' = -delta x2 - alpha x1 - 2 beta x1^3 u.
    """

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 1], -delta * x[..., 1] - alpha * x[..., 0]], axis=-1)

    def g(x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.zeros_like(x[..., 0]), -2.0 * beta * x[..., 0] ** 3], axis=-1)

    return ControlAffineSystem(
        2, 1, f, (g,), name="duffing", params=dict(alpha=alpha, beta=beta, delta=delta)
    )


def linear_1d(a=-1.0, b=1.0) -> ControlAffineSystem:
    """Scalar system x' = a x + b u."""

    def f(x):
        return a * np.asarray(x, dtype=float)

    def g(x):
        return np.full_like(np.asarray(x, dtype=float), b)

    return ControlAffineSystem(1, 1, f, (g,), name="linear_1d", params=dict(a=a, b=b))


def saturating_1d(a=-1.0, b=1.0) -> ControlAffineSystem:
    """Scalar system x' = a x + b u (1 - x^2).

    For a < 0 the interval [-1, 1] is forward invariant for every control,
    since g vanishes at +-1 and f points inward there.
    """

    def f(x):
        return a * np.asarray(x, dtype=float)

    def g(x):
        x = np.asarray(x, dtype=float)
        return b * (1.0 - x**2)

    return ControlAffineSystem(1, 1, f, (g,), name="saturating_1d", params=dict(a=a, b=b))


BUILTIN_SYSTEMS = {"duffing": duffing, "linear_1d": linear_1d, "saturating_1d": saturating_1d}


def _as_control(system, u):
    if u is None:
        return np.zeros(system.control_dim)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (system.control_dim,):
        raise UsageError(f"control has shape {u.shape}, expected ({system.control_dim},)")
    return u


def eval_rhs(system: ControlAffineSystem, x, u=None) -> np.ndarray:
    """f(x) + sum_i g_i(x) u_i for a single state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (system.state_dim,):
        raise UsageError(f"state has shape {x.shape}, expected ({system.state_dim},)")
    u = _as_control(system, u)
    out = system.rhs(x, u)
    if not np.all(np.isfinite(out)):
        k = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NumericalError(f"right-hand side coordinate {k} is not finite at x={x.tolist()}")
    return out


@dataclass(frozen=True)
class ControlSignal:
    """Constant, zero-order-hold or callable control in the box [lower, upper]."""

    kind: str
    control_dim: int
    values: np.ndarray
    segment_duration: Optional[float] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    func: Optional[Callable[[float], np.ndarray]] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("constant", "zoh", "callable"):
            raise UsageError(f"unknown control kind {self.kind!r}")
        if self.kind == "zoh" and not (self.segment_duration and self.segment_duration > 0):
            raise UsageError("segment_duration must be > 0 for zero-order-hold controls")
        if self.kind != "callable" and self.lower is not None:
            vals = np.asarray(self.values)
            if np.any(vals < self.lower - 1e-12) or np.any(vals > self.upper + 1e-12):
                raise UsageError("control values leave the admissible box")

    @classmethod
    def constant(cls, value, lower=None, upper=None) -> "ControlSignal":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        lo, hi = _bounds(len(value), lower, upper)
        return cls("constant", len(value), value.reshape(1, -1), lower=lo, upper=hi)

    @classmethod
    def zoh(cls, values, segment_duration, lower=None, upper=None) -> "ControlSignal":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        lo, hi = _bounds(values.shape[1], lower, upper)
        return cls("zoh", values.shape[1], values, float(segment_duration), lo, hi)

    @classmethod
    def from_callable(cls, func, control_dim, lower=None, upper=None) -> "ControlSignal":
        lo, hi = _bounds(control_dim, lower, upper)
        return cls("callable", control_dim, np.zeros((0, control_dim)), lower=lo, upper=hi, func=func)

    def __call__(self, t: float, left: bool = False) -> np.ndarray:
        """Control value at time t; ``left=True`` gives the left limit u(t-)."""
        if self.kind == "constant":
            return self.values[0]
        if self.kind == "callable":
            u = np.atleast_1d(np.asarray(self.func(t), dtype=float))
            if self.lower is not None and (np.any(u < self.lower - 1e-12) or np.any(u > self.upper + 1e-12)):
                raise UsageError(f"control value {u.tolist()} at t={t} leaves the admissible box")
            return u
        s = t / self.segment_duration
        if left:
            idx = int(np.ceil(s - _TIME_TOL)) - 1
        else:
            idx = int(np.floor(s + _TIME_TOL))
        idx = min(max(idx, 0), len(self.values) - 1)
        return self.values[idx]


def _bounds(n, lower, upper):
    if lower is None and upper is None:
        return None, None
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
    return lo, hi


def random_zoh(control_dim, T, rng, segment_duration=DEFAULT_SEGMENT, lower=-1.0, upper=1.0) -> ControlSignal:
    """Piecewise-constant control drawn uniformly in the box, one value per segment."""
    rng = np.random.default_rng(rng)
    n_seg = int(np.ceil(T / segment_duration - _TIME_TOL)) + 1
    lo, hi = _bounds(control_dim, lower, upper)
    values = rng.uniform(lo, hi, size=(n_seg, control_dim))
    return ControlSignal.zoh(values, segment_duration, lo, hi)


@dataclass(frozen=True)
class StateDomain:
    """Axis-aligned box intersected with {x : h_j(x) <= 0 for all j}."""

    lower: np.ndarray
    upper: np.ndarray
    constraints: tuple = ()

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise UsageError("domain box needs upper > lower on every axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def volume(self):
        return float(np.prod(self.upper - self.lower))

    def in_box(self, X):
        X = np.atleast_2d(X)
        return np.all((X >= self.lower) & (X <= self.upper), axis=-1)

    def contains(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = self.in_box(X)
        for h in self.constraints:
            ok &= _constraint_values(h, X) <= 0
        return ok


def _constraint_values(h, X):
    fn = getattr(h, "value", h)
    return np.asarray(fn(X), dtype=float)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise UsageError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise UsageError("times must be strictly increasing")


@dataclass(frozen=True)
class DomainReport:
    contained: bool
    time: Optional[float] = None
    index: Optional[int] = None  # None means the box itself was left
    value: Optional[float] = None


def time_grid(T: float, dt: float) -> np.ndarray:
    """Uniform grid 0, dt, 2dt, ... ending exactly at T (last step shortened)."""
    if not dt > 0:
        raise UsageError("dt must be > 0")
    if not T >= dt * (1 - _TIME_TOL):
        raise UsageError("T must be >= dt")
    n = int(np.floor(T / dt + _TIME_TOL))
    times = np.arange(n + 1) * dt
    if T - times[-1] > _TIME_TOL * max(T, 1.0):
        times = np.append(times, T)
    else:
        times[-1] = T
    return times


def _control_fn(system_dim, signal):
    if signal is None:
        zero = np.zeros(system_dim)
        return lambda t, left=False: zero
    return signal


def rk4_path(rhs, x0, times, control, threshold=np.inf):
    """Classical RK4 on ``times`` for x' = rhs(x, u(t)).

    Stages evaluate the control at the stage time; the end-of-step stage
    uses the left limit so a zero-order-hold switch on a grid point does
    not leak into the preceding step.

    Returns (states, controls_at_grid, escape_index). ``escape_index`` is
    the first grid index whose state is non-finite or has norm above
    ``threshold``; states are truncated before it.
    """
    x = np.array(x0, dtype=float)
    states = np.empty((len(times),) + x.shape)
    states[0] = x
    us = [control(times[0])]
    for k in range(len(times) - 1):
        t, h = times[k], times[k + 1] - times[k]
        u0 = control(t)
        um = control(t + 0.5 * h)
        u1 = control(t + h, left=True)
        k1 = rhs(x, u0)
        k2 = rhs(x + 0.5 * h * k1, um)
        k3 = rhs(x + 0.5 * h * k2, um)
        k4 = rhs(x + h * k3, u1)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = not np.all(np.isfinite(x)) or np.linalg.norm(x) > threshold
        if bad:
            return states[: k + 1], np.array(us), k + 1
        states[k + 1] = x
        us.append(control(times[k + 1]))
    return states, np.array(us), None


def integrate(system, x0, u=None, T=1.0, dt=DEFAULT_DT, blowup=BLOWUP_STATE) -> Trajectory:
    """Fixed-step RK4 ground truth on the grid from :func:`time_grid`.

    Raises DivergenceError when the state norm exceeds ``blowup``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.state_dim,):
        raise UsageError(f"x0 has shape {x0.shape}, expected ({system.state_dim},)")
    if u is not None and u.control_dim != system.control_dim:
        raise UsageError("control dimension does not match the system")
    times = time_grid(T, dt)
    control = _control_fn(system.control_dim, u)
    states, controls, esc = rk4_path(system.rhs, x0, times, control, blowup)
    if esc is not None:
        raise DivergenceError(f"state left the ball of radius {blowup:g} at t={times[esc]:.6g}", times[esc])
    return Trajectory(times, states, controls.reshape(len(times), system.control_dim))


def flow_batch(system, X, U, duration, dt=DEFAULT_DT) -> np.ndarray:
    """Flow each row of X over ``duration`` under its own constant control row of U."""
    X = np.array(X, dtype=float)
    U = np.asarray(U, dtype=float).reshape(len(X), system.control_dim)
    times = time_grid(duration, dt)
    for h in np.diff(times):
        k1 = system.rhs(X, U)
        k2 = system.rhs(X + 0.5 * h * k1, U)
        k3 = system.rhs(X + 0.5 * h * k2, U)
        k4 = system.rhs(X + h * k3, U)
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def check_domain(traj: Trajectory, domain: StateDomain) -> DomainReport:
    """First grid point where the trajectory leaves the domain, if any."""
    X = traj.states
    outside = np.maximum(domain.lower - X, X - domain.upper).max(axis=1)
    values = [_constraint_values(h, X) for h in domain.constraints]
    for k in range(len(X)):
        if outside[k] > 0:
            return DomainReport(False, float(traj.times[k]), None, float(outside[k]))
        for j, v in enumerate(values):
            if v[k] > 0:
                return DomainReport(False, float(traj.times[k]), j, float(v[k]))
    return DomainReport(True)
