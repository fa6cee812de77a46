"""Bilinear Koopman-generator surrogate and the eDMDc linear baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .dictionary import Dictionary, ObservableCoeffs
from .dynamics import ControlSignal, flow_batch, rk4_path, time_grid
from .edmd import EdmdFit, GeneratorMatrix, sample_iid
from .errors import AssemblyError, RankDeficiencyError, UsageError

BLOWUP_LIFTED = 1e9


@dataclass(frozen=True)
class BilinearSurrogate:
    """L(u) = L0 + sum_i u_i B_i with B_i = L^{e_i} - L^0.

    Matrices use the coefficient convention of :class:`GeneratorMatrix`.
    """

    L0: np.ndarray
    B: tuple
    dictionary: Optional[Dictionary] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.L0.shape
        if len(n) != 2 or n[0] != n[1] or any(b.shape != n for b in self.B):
            raise AssemblyError("all surrogate matrices must share the same N x N shape")
        if self.dictionary is not None and self.dictionary.size != n[0]:
            raise AssemblyError("surrogate size does not match its dictionary")

    @property
    def N(self):
        return self.L0.shape[0]

    @property
    def control_dim(self):
        return len(self.B)

    def generator_at(self, u) -> np.ndarray:
        return surrogate_generator_at(self, u)


def assemble_surrogate(fits: Sequence, dictionary: Optional[Dictionary] = None) -> BilinearSurrogate:
    """Combine fits for the constant controls 0, e_1, ..., e_nc (in that order)."""
    if not fits:
        raise AssemblyError("need at least the fit for control 0")
    n_c = len(fits) - 1
    mats, labels, prov = [], None, []
    for i, fit in enumerate(fits):
        if isinstance(fit, EdmdFit):
            u, mat = fit.control_value, fit.L_hat
            if labels is None:
                labels = fit.labels
            elif fit.labels != labels:
                raise AssemblyError(f"fit {i} was built on a different dictionary")
            prov.append({"m": fit.m, "seed": fit.seed})
        elif isinstance(fit, GeneratorMatrix):
            u, mat = np.asarray(fit.provenance.get("control", np.eye(n_c)[i - 1] if i else np.zeros(n_c))), fit.matrix
            prov.append(dict(fit.provenance))
        else:
            mat = np.asarray(fit, dtype=float)
            u = np.eye(n_c)[i - 1] if i else np.zeros(n_c)
            prov.append({})
        expected = np.eye(n_c)[i - 1] if i else np.zeros(n_c)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != expected.shape or not np.array_equal(u, expected):
            raise AssemblyError(f"fit {i} has control {u.tolist()}, expected {expected.tolist()}")
        mats.append(np.asarray(mat, dtype=float))
    if dictionary is not None and labels is not None and tuple(dictionary.labels) != tuple(labels):
        raise AssemblyError("fits do not match the given dictionary")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise AssemblyError("fits have different dictionary sizes")
    L0 = mats[0]
    B = tuple(m - L0 for m in mats[1:])
    return BilinearSurrogate(L0, B, dictionary, {"fits": prov})


def surrogate_generator_at(s: BilinearSurrogate, u) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float)) if s.control_dim else np.zeros(0)
    if u.shape != (s.control_dim,):
        raise UsageError(f"control has shape {u.shape}, expected ({s.control_dim},)")
    out = s.L0.copy()
    for ui, b in zip(u, s.B):
        out += ui * b
    return out


@dataclass(frozen=True)
class LiftedTrajectory:
    """Lifted states on ``times``; truncated at ``diverged_at`` if it is set."""

    times: np.ndarray
    z: np.ndarray
    diverged_at: Optional[float] = None

    @property
    def full_times(self):
        return self.times

    def padded(self):
        """States on the full grid, NaN after divergence."""
        out = np.full((len(self.times), self.z.shape[1]), np.nan)
        out[: len(self.z)] = self.z
        return out


def propagate(s: BilinearSurrogate, z0, u: Optional[ControlSignal] = None, T=1.0, dt=1e-3,
              threshold=BLOWUP_LIFTED) -> LiftedTrajectory:
    """RK4 for z' = L(u(t))^T z on the same grid as :func:`dynamics.integrate`."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (s.N,):
        raise UsageError(f"z0 has shape {z0.shape}, expected ({s.N},)")
    if u is not None and u.control_dim != s.control_dim:
        raise UsageError("control dimension does not match the surrogate")
    K0 = np.ascontiguousarray(s.L0.T)
    KB = [np.ascontiguousarray(b.T) for b in s.B]

    def rhs(z, uval):
        out = K0 @ z
        for ui, kb in zip(uval, KB):
            if ui != 0.0:
                out = out + ui * (kb @ z)
        return out

    times = time_grid(T, dt)
    if u is None:
        zero = np.zeros(s.control_dim)
        control = lambda t, left=False: zero  # noqa: E731
    else:
        control = u
    z, _, esc = rk4_path(rhs, z0, times, control, threshold)
    return LiftedTrajectory(times, z, None if esc is None else float(times[esc]))


@dataclass(frozen=True)
class ObservablePrediction:
    times: np.ndarray
    values: np.ndarray  # NaN after divergence
    diverged_at: Optional[float] = None


def predict_observable(s: BilinearSurrogate, h_coeffs, x0, u=None, T=1.0, dt=1e-3) -> ObservablePrediction:
    """h~(t) = c^T z(t) with z(0) = Psi(x0), the lifted form of c' = L(u) c.

    At t = 0 this equals (P_V h)(x0).
    """
    if s.dictionary is None:
        raise UsageError("surrogate has no dictionary attached")
    c = h_coeffs.coeffs if isinstance(h_coeffs, ObservableCoeffs) else np.asarray(h_coeffs, dtype=float)
    z0 = s.dictionary.evaluate(np.asarray(x0, dtype=float))
    traj = propagate(s, z0, u, T, dt)
    return ObservablePrediction(traj.times, traj.padded() @ c, traj.diverged_at)


@dataclass(frozen=True)
class EdmdcModel:
    """Discrete-time lifted linear model z_{k+1} = A z_k + B u_k."""

    A: np.ndarray
    B: np.ndarray
    sample_interval: float
    residual: float
    dictionary: Optional[Dictionary] = None
    metadata: dict = field(default_factory=dict)
    discrete: bool = True

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise UsageError("inconsistent eDMDc matrix shapes")


def fit_edmdc(dictionary, system, domain, m, sample_interval=0.01, control_lower=-1.0, control_upper=1.0,
              seed=0, integration_dt=1e-3) -> EdmdcModel:
    """Least-squares fit of Psi(x+) ~ A Psi(x) + B u on m snapshot pairs.

    States are i.i.d. uniform on the domain, controls i.i.d. uniform on
    [control_lower, control_upper]; x+ is the RK4 flow over
    ``sample_interval`` under the pair's constant control.
    """
    rng = np.random.default_rng(seed)
    samples = sample_iid(domain, m, rng.integers(2**63))
    n_c = system.control_dim
    lo = np.broadcast_to(np.asarray(control_lower, dtype=float), (n_c,))
    hi = np.broadcast_to(np.asarray(control_upper, dtype=float), (n_c,))
    U = rng.uniform(lo, hi, size=(m, n_c))
    X = samples.points
    Xp = flow_batch(system, X, U, sample_interval, min(integration_dt, sample_interval))
    P, Pp = dictionary.evaluate(X), dictionary.evaluate(Xp)
    N = P.shape[1]
    if np.linalg.matrix_rank(P) < N:
        raise RankDeficiencyError(
            f"lifted snapshot matrix has rank {np.linalg.matrix_rank(P)} < N={N}; "
            "use more data or a smaller dictionary"
        )
    Z = np.hstack([P, U])
    W = scipy.linalg.lstsq(Z, Pp)[0]
    residual = float(np.linalg.norm(Z @ W - Pp))
    meta = {"m": m, "seed": int(seed), "sample_interval": sample_interval,
            "control_box": [lo.tolist(), hi.tolist()], "integration_dt": integration_dt}
    return EdmdcModel(W[:N].T.copy(), W[N:].T.copy(), float(sample_interval), residual, dictionary, meta)


def predict_edmdc(model: EdmdcModel, h_coeffs, x0, u=None, T=1.0, threshold=BLOWUP_LIFTED) -> ObservablePrediction:
    """Iterate the discrete model from z0 = Psi(x0) with u_k = u(k * interval).

    Values are reported at the multiples of the sample interval up to T.
    """
    c = h_coeffs.coeffs if isinstance(h_coeffs, ObservableCoeffs) else np.asarray(h_coeffs, dtype=float)
    times = np.arange(int(np.floor(T / model.sample_interval + 1e-9)) + 1) * model.sample_interval
    z = model.dictionary.evaluate(np.asarray(x0, dtype=float))
    n_c = model.B.shape[1]
    vals = np.full(len(times), np.nan)
    vals[0] = c @ z
    diverged = None
    for k in range(len(times) - 1):
        uk = u(times[k]) if u is not None else np.zeros(n_c)
        with np.errstate(over="ignore", invalid="ignore"):
            z = model.A @ z + model.B @ uk
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > threshold:
            diverged = float(times[k + 1])
            break
        vals[k + 1] = c @ z
    return ObservablePrediction(times, vals, diverged)
