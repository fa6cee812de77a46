"""Observable dictionaries: monomials, P1 finite elements and user functions."""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from . import quadrature
from .errors import MeshError, NumericalError, SizeError, UsageError

MAX_DICTIONARY_SIZE = 10_000


@dataclass(frozen=True)
class Observable:
    """Scalar function with gradient, both vectorized over rows of X (m, d)."""

    label: str
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    expression: Optional[str] = None

    @classmethod
    def from_expression(cls, expr: str, dim: int, label: Optional[str] = None) -> "Observable":
        """Build from a sympy-parsable expression in the variables x1..xd."""
        import sympy

        syms = sympy.symbols(" ".join(f"x{i + 1}" for i in range(dim)), real=True, seq=True)
        local = {str(s): s for s in syms}
        try:
            e = sympy.sympify(expr, locals=local)
        except (sympy.SympifyError, SyntaxError, TypeError, AttributeError, NameError, ValueError) as exc:
            raise UsageError(f"cannot parse observable expression {expr!r}: {exc}") from None
        extra = e.free_symbols - set(syms)
        if extra:
            raise UsageError(f"expression {expr!r} uses unknown symbols {sorted(map(str, extra))}")
        f = sympy.lambdify(syms, e, "numpy")
        grads = [sympy.lambdify(syms, sympy.diff(e, s), "numpy") for s in syms]

        def value(X):
            X = np.atleast_2d(np.asarray(X, dtype=float))
            return np.broadcast_to(np.asarray(f(*X.T), dtype=float), (len(X),)).copy()

        def gradient(X):
            X = np.atleast_2d(np.asarray(X, dtype=float))
            cols = [np.broadcast_to(np.asarray(g(*X.T), dtype=float), (len(X),)) for g in grads]
            return np.stack(cols, axis=-1)

        return cls(label or expr, value, gradient, expression=expr)

    @classmethod
    def affine(cls, weights, offset=0.0, label=None) -> "Observable":
        """h(x) = w . x + offset."""
        w = np.asarray(weights, dtype=float)

        def value(X):
            return np.atleast_2d(X) @ w + offset

        def gradient(X):
            return np.broadcast_to(w, np.atleast_2d(X).shape).copy()

        terms = " + ".join(f"{c:g}*x{i + 1}" for i, c in enumerate(w) if c != 0) or "0"
        return cls(label or f"{terms} + {offset:g}", value, gradient)


class MonomialBlock:
    def __init__(self, dim, max_degree):
        exps = []
        for k in range(max_degree + 1):
            exps.extend(
                a for a in sorted(itertools.product(range(k + 1), repeat=dim), reverse=True) if sum(a) == k
            )
        self.exponents = np.array(exps, dtype=int).reshape(-1, dim)
        self.labels = [_monomial_label(a) for a in self.exponents]
        self.dim = dim
        self.max_degree = max_degree

    def evaluate(self, X):
        return np.prod(X[:, None, :] ** self.exponents[None, :, :], axis=2)

    def gradient(self, X):
        m, d = X.shape
        G = np.empty((m, len(self.exponents), d))
        for k in range(d):
            lowered = self.exponents.copy()
            coef = lowered[:, k].astype(float)
            lowered[:, k] = np.maximum(lowered[:, k] - 1, 0)
            G[:, :, k] = coef * np.prod(X[:, None, :] ** lowered[None, :, :], axis=2)
        return G


def _monomial_label(a):
    parts = [f"x{i + 1}" + (f"^{p}" if p > 1 else "") for i, p in enumerate(a) if p > 0]
    return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class FemMesh:
    """Uniform grid on a box (1D intervals or 2D right triangles).

    The number of cells per axis is ceil(edge / mesh_size); the actual
    spacing ``spacing[k] = edge_k / cells[k]`` is therefore <= mesh_size.
    """

    lower: np.ndarray
    upper: np.ndarray
    mesh_size: float
    cells: tuple = field(init=False)
    spacing: np.ndarray = field(init=False)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if len(lo) not in (1, 2):
            raise MeshError("finite element dictionaries support dimension 1 or 2 only")
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise MeshError("mesh box needs upper > lower on every axis")
        if not self.mesh_size > 0:
            raise MeshError("mesh_size must be > 0")
        edge = hi - lo
        if np.any(self.mesh_size > edge * (1 + 1e-12)):
            raise MeshError(f"mesh_size {self.mesh_size} exceeds the box edge {edge.min():g}")
        cells = tuple(int(np.ceil(e / self.mesh_size - 1e-9)) for e in edge)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "spacing", edge / np.array(cells))

    @property
    def dim(self):
        return len(self.lower)

    @property
    def node_count(self):
        return int(np.prod([c + 1 for c in self.cells]))

    @property
    def nodes(self):
        axes = [np.linspace(self.lower[k], self.upper[k], self.cells[k] + 1) for k in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def locate(self, X):
        """Cell indices and local coordinates in [0, 1]; a point on a cell
        boundary belongs to the lower-index cell."""
        r = (X - self.lower) / self.spacing
        c = np.ceil(r - 1e-12).astype(int) - 1
        c = np.clip(c, 0, np.array(self.cells) - 1)
        return c, r - c


class FemBlock:
    def __init__(self, mesh: FemMesh):
        self.mesh = mesh
        self.dim = mesh.dim
        self.labels = [
            "hat(" + ",".join(f"{v:.6g}" for v in node) + ")" for node in mesh.nodes
        ]

    def _local(self, X):
        mesh = self.mesh
        inside = np.all((X >= mesh.lower - 1e-12) & (X <= mesh.upper + 1e-12), axis=1)
        c, s = mesh.locate(X)
        return inside, c, s

    def _elements(self, X):
        """Per point: the three (or two) node indices, their barycentric
        values and physical gradients."""
        mesh = self.mesh
        inside, c, s = self._local(X)
        m = len(X)
        if self.dim == 1:
            h = mesh.spacing[0]
            idx = np.stack([c[:, 0], c[:, 0] + 1], -1)
            vals = np.stack([1 - s[:, 0], s[:, 0]], -1)
            grads = np.broadcast_to(np.array([[-1 / h], [1 / h]]), (m, 2, 1))
            return inside, idx, vals, grads
        hx, hy = mesh.spacing
        ny1 = mesh.cells[1] + 1
        cx, cy = c[:, 0], c[:, 1]
        sx, sy = s[:, 0], s[:, 1]
        low = sx >= sy
        n00 = cx * ny1 + cy
        n10 = (cx + 1) * ny1 + cy
        n11 = (cx + 1) * ny1 + cy + 1
        n01 = cx * ny1 + cy + 1
        idx = np.where(low[:, None], np.stack([n00, n10, n11], -1), np.stack([n00, n11, n01], -1))
        vals = np.where(
            low[:, None],
            np.stack([1 - sx, sx - sy, sy], -1),
            np.stack([1 - sy, sx, sy - sx], -1),
        )
        g_low = np.array([[-1 / hx, 0.0], [1 / hx, -1 / hy], [0.0, 1 / hy]])
        g_up = np.array([[0.0, -1 / hy], [1 / hx, 0.0], [-1 / hx, 1 / hy]])
        grads = np.where(low[:, None, None], g_low[None], g_up[None])
        return inside, idx, vals, grads

    def evaluate(self, X):
        inside, idx, vals, _ = self._elements(X)
        out = np.zeros((len(X), self.mesh.node_count))
        rows = np.repeat(np.arange(len(X)), idx.shape[1])
        out[rows, idx.ravel()] = (vals * inside[:, None]).ravel()
        return out

    def gradient(self, X):
        inside, idx, _, grads = self._elements(X)
        out = np.zeros((len(X), self.mesh.node_count, self.dim))
        rows = np.repeat(np.arange(len(X)), idx.shape[1])
        out[rows, idx.ravel(), :] = (grads * inside[:, None, None]).reshape(-1, self.dim)
        return out


class FunctionBlock:
    def __init__(self, observables: Sequence[Observable], dim: int):
        self.observables = list(observables)
        self.labels = [o.label for o in self.observables]
        self.dim = dim

    def evaluate(self, X):
        return np.stack([np.asarray(o.value(X), dtype=float) for o in self.observables], axis=-1)

    def gradient(self, X):
        return np.stack([np.asarray(o.gradient(X), dtype=float) for o in self.observables], axis=1)


@dataclass(frozen=True)
class Dictionary:
    """Ordered observables psi_1..psi_N built from blocks.

    ``evaluate`` returns rows of values, i.e. the transpose of the usual
    N x m data matrix Psi(X).
    """

    blocks: tuple
    kind: str
    dim: int

    def __post_init__(self):
        labels = self.labels
        if not labels:
            raise UsageError("a dictionary needs at least one observable")
        if len(set(labels)) != len(labels):
            dupes = sorted({l for l in labels if labels.count(l) > 1})
            raise UsageError(f"dictionary labels must be unique, duplicated: {dupes}")

    @property
    def labels(self):
        return [lab for b in self.blocks for lab in b.labels]

    @property
    def size(self):
        return len(self.labels)

    def index(self, label):
        return self.labels.index(label)

    @property
    def mesh(self) -> Optional[FemMesh]:
        for b in self.blocks:
            if isinstance(b, FemBlock):
                return b.mesh
        return None

    @property
    def function_observables(self):
        return [o for b in self.blocks if isinstance(b, FunctionBlock) for o in b.observables]

    def evaluate(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.dim:
            raise UsageError(f"points have dimension {X2.shape[1]}, dictionary expects {self.dim}")
        out = np.concatenate([b.evaluate(X2) for b in self.blocks], axis=1)
        self._check_finite(out)
        return out[0] if single else out

    def gradient(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.dim:
            raise UsageError(f"points have dimension {X2.shape[1]}, dictionary expects {self.dim}")
        out = np.concatenate([b.gradient(X2) for b in self.blocks], axis=1)
        self._check_finite(out)
        return out[0] if single else out

    def _check_finite(self, arr):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NumericalError(f"observable {self.labels[bad[1]]!r} evaluated to a non-finite value")

    def quadrature_layout(self):
        """(cells, triangulated) for a composite quadrature aligned with the mesh."""
        mesh = self.mesh
        if mesh is None:
            return 1, False
        return mesh.cells, mesh.dim == 2


def monomial_dictionary(d: int, max_degree: int, cap: int = MAX_DICTIONARY_SIZE) -> Dictionary:
    """All monomials of total degree <= max_degree in graded lexicographic order."""
    if d < 1 or max_degree < 0:
        raise UsageError("need d >= 1 and max_degree >= 0")
    n = comb(max_degree + d, d)
    if n > cap:
        raise SizeError(f"monomial dictionary would have {n} elements, cap is {cap}")
    return Dictionary((MonomialBlock(d, max_degree),), "monomial", d)


def fem_dictionary(mesh: FemMesh) -> Dictionary:
    """Linear hat functions with psi_i(x_j) = delta_ij on the mesh nodes.

    Hats vanish outside the closed mesh box.
    """
    return Dictionary((FemBlock(mesh),), "fem", mesh.dim)


def composite_dictionary(constraints: Sequence[Observable], base: Dictionary, lower=None, upper=None,
                         check=True) -> Dictionary:
    """Constraint functions first, then the base dictionary.

    Duplicated functions are kept. A constraint whose label collides with a
    base label is renamed ``constraint:<label>`` so labels stay unique.
    """
    if not constraints:
        return base
    taken = set(base.labels)
    renamed = []
    for h in constraints:
        if h.label in taken:
            h = dataclasses.replace(h, label=f"constraint:{h.label}")
        renamed.append(h)
    block = FunctionBlock(renamed, base.dim)
    d = Dictionary((block,) + tuple(base.blocks), "composite", base.dim)
    if check:
        if lower is None:
            mesh = base.mesh
            lower, upper = (mesh.lower, mesh.upper) if mesh is not None else (-np.ones(base.dim), np.ones(base.dim))
        check_gradients(Dictionary((block,), "composite", base.dim), lower, upper)
    return d


def eval_dict(dictionary: Dictionary, x) -> np.ndarray:
    return dictionary.evaluate(x)


def eval_dict_grad(dictionary: Dictionary, x) -> np.ndarray:
    return dictionary.gradient(x)


def check_gradients(dictionary: Dictionary, lower, upper, n_points=20, seed=0, rtol=1e-5):
    """Compare analytic gradients with central differences at random box points."""
    rng = np.random.default_rng(seed)
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    X = rng.uniform(lower, upper, size=(n_points, dictionary.dim))
    G = dictionary.gradient(X)
    for k in range(dictionary.dim):
        step = 1e-6 * np.maximum(1.0, np.abs(X[:, k]))
        Xp, Xm = X.copy(), X.copy()
        Xp[:, k] += step
        Xm[:, k] -= step
        fd = (dictionary.evaluate(Xp) - dictionary.evaluate(Xm)) / (2 * step[:, None])
        err = np.abs(fd - G[:, :, k]) / np.maximum(1.0, np.abs(G[:, :, k]))
        if np.any(err > rtol):
            i, j = np.unravel_index(np.argmax(err), err.shape)
            raise NumericalError(
                f"gradient of {dictionary.labels[j]!r} disagrees with finite differences "
                f"at {X[i].tolist()} (component {k}, relative error {err[i, j]:.2e})"
            )


@dataclass(frozen=True)
class ObservableCoeffs:
    """Coordinates of an element of span(V) in the dictionary basis."""

    coeffs: np.ndarray
    dictionary: Dictionary
    label: str = ""
    exact: bool = False
    residual: float = 0.0

    def __post_init__(self):
        if len(self.coeffs) != self.dictionary.size:
            raise UsageError(f"expected {self.dictionary.size} coefficients, got {len(self.coeffs)}")

    @classmethod
    def unit(cls, dictionary: Dictionary, label: str) -> "ObservableCoeffs":
        c = np.zeros(dictionary.size)
        c[dictionary.index(label)] = 1.0
        return cls(c, dictionary, label, exact=True, residual=0.0)

    def __call__(self, X):
        return np.atleast_2d(self.dictionary.evaluate(X)) @ self.coeffs

    def as_observable(self) -> Observable:
        def grad(X):
            return np.einsum("mnd,n->md", np.atleast_3d(self.dictionary.gradient(np.atleast_2d(X))), self.coeffs)

        return Observable(f"P[{self.label}]", self.__call__, grad)


def gram_matrix(dictionary: Dictionary, lower, upper, q=None):
    """Gram matrix of the dictionary and the quadrature rule used."""
    pts, w = _rule(dictionary, lower, upper, q)
    P = dictionary.evaluate(pts)
    return P.T @ (w[:, None] * P), pts, w


def _rule(dictionary, lower, upper, q):
    cells, tri = dictionary.quadrature_layout()
    if q is None:
        q = 40 if dictionary.mesh is None else 8
    return quadrature.box_rule(lower, upper, q, cells, tri)


def project(dictionary: Dictionary, h, lower, upper, q=None) -> ObservableCoeffs:
    """L2(box) orthogonal projection of ``h`` onto span(V).

    ``h`` is an Observable or a vectorized callable. Solves C c = b with a
    Tikhonov shift of 1e-12 * ||C||_F.
    """
    fn = h.value if isinstance(h, Observable) else h
    label = h.label if isinstance(h, Observable) else getattr(h, "__name__", "h")
    C, pts, w = gram_matrix(dictionary, lower, upper, q)
    P = dictionary.evaluate(pts)
    hv = np.asarray(fn(pts), dtype=float)
    b = P.T @ (w * hv)
    shift = 1e-12 * np.linalg.norm(C, "fro")
    Cs = 0.5 * (C + C.T) + shift * np.eye(len(C))
    c = scipy.linalg.solve(Cs, b, assume_a="sym")
    resid = float(np.sqrt(max(np.dot(w, (hv - P @ c) ** 2), 0.0)))
    return ObservableCoeffs(c, dictionary, label, exact=False, residual=resid)
