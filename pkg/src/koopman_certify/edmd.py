"""Empirical and quadrature-based Galerkin estimates of the Koopman generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import quadrature
from .dictionary import Dictionary
from .dynamics import ControlAffineSystem, StateDomain
from .errors import NumericalError, RankDeficiencyError, SamplingError, UsageError
from .seeding import subseed

MAX_CONDITION = 1e14
SHIFT_SCALE = 1e-12
RESIDUAL_RTOL = 1e-8
DENSE_REFERENCE_SIZE = 10**6


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray
    seed: Optional[int]
    attempts: int
    accepted: int

    @property
    def m(self):
        return len(self.points)


def sample_iid(domain: StateDomain, m: int, seed) -> SampleSet:
    """m points uniform on the domain, by rejection from its bounding box."""
    if m < 1:
        raise UsageError("m must be >= 1")
    rng = np.random.default_rng(seed)
    if not domain.constraints:
        pts = rng.uniform(domain.lower, domain.upper, size=(m, domain.dim))
        return SampleSet(pts, seed, m, m)
    chunks, accepted, attempts = [], 0, 0
    while accepted < m:
        batch = max(2 * (m - accepted), 1024)
        cand = rng.uniform(domain.lower, domain.upper, size=(batch, domain.dim))
        keep = cand[domain.contains(cand)]
        attempts += batch
        accepted += len(keep)
        chunks.append(keep)
        if attempts >= 10**5 and accepted < 1e-4 * attempts:
            raise SamplingError(
                f"acceptance ratio {accepted / attempts:.1e} after {attempts} attempts; "
                "use a bounding box that fits the domain more tightly"
            )
    pts = np.concatenate(chunks)[:m]
    return SampleSet(pts, seed, attempts, accepted)


def apply_generator(dictionary: Dictionary, system: ControlAffineSystem, u_const, x) -> np.ndarray:
    """(L psi_j)(x) = grad psi_j(x) . (f(x) + sum_i g_i(x) u_i) for every j.

    Accepts a single point (d,) or rows (m, d).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    u = np.atleast_1d(np.asarray(u_const, dtype=float)) if system.control_dim else np.zeros(0)
    if u.shape != (system.control_dim,):
        raise UsageError(f"control has shape {u.shape}, expected ({system.control_dim},)")
    G = dictionary.gradient(X)
    F = system.rhs(X, u)
    out = np.einsum("mnd,md->mn", G, F)
    return out[0] if single else out


def regularized_solve(C, A, shift_scale=SHIFT_SCALE):
    """Solve C L = A for symmetric positive semidefinite C.

    C is symmetrized and shifted by ``shift_scale * trace(C) / N``; the
    shifted system is solved by rank-revealing QR followed by one step of
    iterative refinement against the unshifted matrix. Returns
    ``(L, condition, residual)`` where residual is ||C L - A||_F.
    """
    Csym = 0.5 * (C + C.T)
    n = len(Csym)
    shift = shift_scale * np.trace(Csym) / n
    Cs = Csym + shift * np.eye(n)
    cond = float(np.linalg.cond(Cs))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise RankDeficiencyError(
            f"Gram matrix condition number {cond:.2e} exceeds {MAX_CONDITION:.0e}; "
            "use more data or a smaller dictionary"
        )
    L = scipy.linalg.lstsq(Cs, A, lapack_driver="gelsy")[0]
    L = L + scipy.linalg.lstsq(Cs, A - Csym @ L, lapack_driver="gelsy")[0]
    residual = float(np.linalg.norm(Csym @ L - A))
    return L, cond, residual


@dataclass(frozen=True)
class GeneratorMatrix:
    """N x N generator matrix acting on coefficient vectors.

    Column j holds the dictionary coordinates of L psi_j, i.e. the matrix
    is C^{-1} A. Lifted states z = Psi(x) therefore evolve with its
    transpose.
    """

    matrix: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise NumericalError("generator matrix has non-finite entries")

    @property
    def N(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class EdmdFit:
    C_hat: np.ndarray
    A_hat: np.ndarray
    L_hat: np.ndarray
    control_value: np.ndarray
    m: int
    condition: float
    residual: float
    seed: Optional[int] = None
    labels: tuple = ()

    @property
    def N(self):
        return self.L_hat.shape[0]

    def generator(self) -> GeneratorMatrix:
        return GeneratorMatrix(
            self.L_hat,
            {"kind": "empirical", "m": self.m, "seed": self.seed, "control": self.control_value.tolist()},
        )


def build_matrices(dictionary, system, u_const, samples, weights=None, seed=None) -> EdmdFit:
    """C = Psi W Psi^T, A = Psi W (L Psi)^T and L = C^{-1} A.

    Without ``weights`` W = I/m (empirical estimator); with quadrature
    weights the same formulas give the Galerkin matrices.
    """
    if isinstance(samples, SampleSet):
        seed = samples.seed if seed is None else seed
        X = samples.points
    else:
        X = np.atleast_2d(np.asarray(samples, dtype=float))
    m = len(X)
    if m < 1:
        raise UsageError("m must be >= 1")
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=float)
    P = dictionary.evaluate(X)
    LP = apply_generator(dictionary, system, u_const, X)
    C = P.T @ (w[:, None] * P)
    A = P.T @ (w[:, None] * LP)
    L, cond, residual = regularized_solve(C, A)
    anorm = np.linalg.norm(A)
    if anorm > 0 and residual > RESIDUAL_RTOL * anorm:
        raise NumericalError(f"generator solve residual {residual:.2e} exceeds {RESIDUAL_RTOL:.0e} * ||A||_F")
    u = np.atleast_1d(np.asarray(u_const, dtype=float)) if system.control_dim else np.zeros(0)
    return EdmdFit(0.5 * (C + C.T), A, L, u, m, cond, residual, seed, tuple(dictionary.labels))


def control_vertices(n_c: int):
    """The constant controls 0, e_1, ..., e_{n_c}."""
    return [np.zeros(n_c)] + [np.eye(n_c)[i] for i in range(n_c)]


def fit_controls(dictionary, system, domain, m, seed, shared=False):
    """One empirical fit per control in {0, e_1, ...}.

    By default every control gets its own sample set drawn from an
    independent sub-seed; ``shared=True`` reuses one set for all.
    """
    fits = []
    common = sample_iid(domain, m, subseed(seed, 0)) if shared else None
    for i, u in enumerate(control_vertices(system.control_dim)):
        samples = common if shared else sample_iid(domain, m, subseed(seed, i))
        fits.append(build_matrices(dictionary, system, u, samples))
    return fits


def galerkin_reference(dictionary, system, u_const, domain: StateDomain, q=None,
                       reference_size=DENSE_REFERENCE_SIZE) -> GeneratorMatrix:
    """L_V = C^{-1} A with entries integrated against Lebesgue measure on the domain.

    Uses tensor Gauss-Legendre quadrature aligned with the dictionary's
    mesh for d <= 2; for d > 2 a dense uniform sample stands in and the
    provenance says so.
    """
    if domain.dim <= 2:
        cells, tri = dictionary.quadrature_layout()
        if q is None:
            q = 40 if dictionary.mesh is None else 8
        pts, w = quadrature.box_rule(domain.lower, domain.upper, q, cells, tri)
        if domain.constraints:
            w = w * domain.contains(pts)
        fit = build_matrices(dictionary, system, u_const, pts, weights=w)
        prov = {"kind": "reference", "method": "quadrature", "order": q}
    else:
        samples = sample_iid(domain, reference_size, 0)
        fit = build_matrices(dictionary, system, u_const, samples)
        prov = {"kind": "reference", "method": "dense-sample", "m": reference_size}
    prov["control"] = fit.control_value.tolist()
    prov["condition"] = fit.condition
    return GeneratorMatrix(fit.L_hat, prov)


def reference_generators(dictionary, system, domain, q=None):
    return [galerkin_reference(dictionary, system, u, domain, q) for u in control_vertices(system.control_dim)]


def generator_error(ref, est) -> float:
    """Frobenius norm of ref - est."""
    a = ref.matrix if isinstance(ref, GeneratorMatrix) else np.asarray(ref)
    b = est.matrix if isinstance(est, GeneratorMatrix) else np.asarray(est)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def write_generator_csv(path, gen: GeneratorMatrix, labels=None, config_hash=None):
    """Row-major CSV with a commented header carrying N and provenance."""
    lines = [f"# N={gen.N}", "# provenance=" + json.dumps(gen.provenance, sort_keys=True)]
    if config_hash:
        lines.append(f"# config_hash={config_hash}")
    if labels is not None:
        lines.append("# labels=" + json.dumps(list(labels)))
    lines.extend(",".join(repr(float(v)) for v in row) for row in gen.matrix)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_generator_csv(path) -> GeneratorMatrix:
    prov, rows, n = {}, [], None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# N="):
                n = int(line[4:])
            elif line.startswith("# provenance="):
                prov = json.loads(line[len("# provenance="):])
            elif line.startswith("#"):
                continue
            else:
                rows.append([float(v) for v in line.split(",")])
    mat = np.array(rows)
    if n is None or mat.shape != (n, n):
        raise UsageError(f"{path}: expected a {n}x{n} matrix, found shape {mat.shape}")
    return GeneratorMatrix(mat, prov)
