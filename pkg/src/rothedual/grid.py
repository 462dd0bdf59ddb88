"""Cell-centred finite differences on an interval or square with Neumann walls.

Fields are flat numpy arrays of length ``grid.node_count`` (row-major in 2D).
Most routines also accept a trailing batch axis, i.e. arrays of shape
``(node_count, batch)``, which lets many right-hand sides share one
factorisation.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from .exceptions import InvalidParameterError, ShapeMismatchError, SolverError

SOLVE_RTOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform Cartesian grid of ``n**dim`` cells of side ``h = length / n``."""

    dim: int
    n: int
    length: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidParameterError(f"dim must be 1 or 2, got {self.dim!r}")
        if int(self.n) != self.n or self.n < 2:
            raise InvalidParameterError(f"n must be an integer >= 2, got {self.n!r}")
        if not np.isfinite(self.length) or self.length <= 0:
            raise InvalidParameterError(f"length must be positive, got {self.length!r}")

    @property
    def h(self):
        return self.length / self.n

    @property
    def weight(self):
        return self.h**self.dim

    @property
    def node_count(self):
        return self.n**self.dim

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def measure(self):
        """|Omega| = length**dim."""
        return self.length**self.dim

    def coordinates(self):
        """Cell centres, one array of shape ``(node_count,)`` per axis."""
        x = (np.arange(self.n) + 0.5) * self.h
        if self.dim == 1:
            return (x,)
        xx, yy = np.meshgrid(x, x, indexing="ij")
        return (xx.ravel(), yy.ravel())

    @cached_property
    def _laplacian_1d(self):
        n, h = self.n, self.h
        main = -2.0 * np.ones(n)
        main[0] = main[-1] = -1.0
        off = np.ones(n - 1)
        return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2

    @cached_property
    def laplacian(self):
        """Sparse matrix of the discrete Neumann Laplacian."""
        lap = self._laplacian_1d
        if self.dim == 1:
            return lap
        eye = sp.identity(self.n, format="csr")
        return (sp.kron(lap, eye) + sp.kron(eye, lap)).tocsr()

    def summary(self):
        return {"dim": self.dim, "n": self.n, "length": self.length}


def build_grid(dim, n, length=1.0):
    return Grid(dim, n, float(length))


def check_field(grid, f, name="field"):
    """Return ``f`` as a float array whose leading axis matches ``grid``."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 0 or f.shape[0] != grid.node_count:
        raise ShapeMismatchError(
            f"{name} has shape {f.shape}, expected leading size {grid.node_count}"
        )
    return f


def apply_laplacian(grid, f):
    f = check_field(grid, f)
    return grid.laplacian @ f


def laplacian_eigenmode(grid, k_index):
    """Normalised eigenfield of the discrete Laplacian and its eigenvalue.

    ``k_index`` is an integer in 1D and a pair ``(kx, ky)`` in 2D. The field
    has unit weighted L2 norm.
    """
    ks = np.atleast_1d(np.asarray(k_index, dtype=int))
    if ks.size == 1 and grid.dim == 2:
        raise InvalidParameterError("2D eigenmodes need a pair of indices")
    if ks.size != grid.dim:
        raise InvalidParameterError(f"expected {grid.dim} mode indices, got {k_index!r}")
    if np.any(ks < 0) or np.any(ks >= grid.n):
        raise InvalidParameterError(f"mode index {k_index!r} out of range [0, {grid.n})")

    j = np.arange(grid.n) + 0.5
    factors = [np.cos(k * np.pi * j / grid.n) for k in ks]
    eigenvalue = -sum(4.0 / grid.h**2 * np.sin(k * np.pi / (2 * grid.n)) ** 2 for k in ks)
    field = factors[0] if grid.dim == 1 else np.outer(factors[0], factors[1]).ravel()
    field = field / lp_norm(grid, field, 2)
    return field, float(eigenvalue)


def eigenvalues(grid):
    """All eigenvalues in the ordering of :func:`mode_indices`."""
    lam1 = -4.0 / grid.h**2 * np.sin(np.arange(grid.n) * np.pi / (2 * grid.n)) ** 2
    if grid.dim == 1:
        return lam1
    return np.add.outer(lam1, lam1).ravel()


def mode_indices(grid):
    if grid.dim == 1:
        return [int(k) for k in range(grid.n)]
    return [(kx, ky) for kx in range(grid.n) for ky in range(grid.n)]


def lp_norm(grid, f, p):
    """Weighted discrete L^p norm; ``p=np.inf`` gives the max norm.

    With a batch axis the norm is taken over nodes for each column.
    """
    f = check_field(grid, f)
    if p < 1:
        raise InvalidParameterError(f"p must be >= 1, got {p}")
    a = np.abs(f)
    if np.isinf(p):
        return a.max(axis=0)
    if p == 2:
        return np.sqrt(grid.weight * np.sum(a * a, axis=0))
    return (grid.weight * np.sum(a**p, axis=0)) ** (1.0 / p)


def integrate(grid, f):
    f = check_field(grid, f)
    return grid.weight * f.sum(axis=0)


def inner(grid, f, g):
    f = check_field(grid, f)
    g = check_field(grid, g)
    return grid.weight * np.sum(f * g, axis=0)


class _SPDSolver:
    """Solve ``S x = b`` for a sparse SPD matrix, by LU or Jacobi-CG."""

    def __init__(self, matrix, method="direct"):
        if method not in ("direct", "cg"):
            raise InvalidParameterError(f"unknown linear solver {method!r}")
        self.method = method
        self.matrix = matrix.tocsc()
        if method == "direct":
            self._lu = splu(self.matrix)
        else:
            inv_diag = 1.0 / self.matrix.diagonal()
            self._precond = sp.diags(inv_diag)

    def solve(self, b):
        if self.method == "direct":
            return self._lu.solve(np.asarray(b, dtype=float))
        if b.ndim == 2:
            return np.column_stack([self._cg(col) for col in b.T])
        return self._cg(b)

    def _cg(self, b):
        n = b.shape[0]
        if not np.any(b):
            return np.zeros_like(b)
        x, info = cg(self.matrix, b, rtol=SOLVE_RTOL, atol=0.0, maxiter=10 * n, M=self._precond)
        if info != 0:
            res = np.linalg.norm(self.matrix @ x - b) / np.linalg.norm(b)
            raise SolverError(f"conjugate gradient stopped after {info} iterations", res)
        return x


def _positive(grid, a, name):
    a = check_field(grid, a, name)
    if a.ndim != 1:
        raise ShapeMismatchError(f"{name} must be a single field")
    if not np.all(a > 0):
        raise InvalidParameterError(f"{name} must be positive everywhere")
    return a


class DualStepSolver:
    """Reusable solver for ``(Id - tau * D_a * Lap) psi = rhs``.

    Internally works with the SPD form ``(D_a^{-1} - tau * Lap) psi = D_a^{-1} rhs``.
    """

    def __init__(self, grid, a, tau, method="direct"):
        if not tau > 0:
            raise InvalidParameterError(f"tau must be positive, got {tau}")
        self.grid = grid
        self.a = _positive(grid, a, "coefficient a")
        self.tau = float(tau)
        matrix = sp.diags(1.0 / self.a) - self.tau * grid.laplacian
        self._solver = _SPDSolver(matrix, method)

    def solve(self, rhs):
        rhs = check_field(self.grid, rhs, "rhs")
        scale = 1.0 / self.a if rhs.ndim == 1 else (1.0 / self.a)[:, None]
        return self._solver.solve(rhs * scale)

    def apply(self, psi):
        a = self.a if psi.ndim == 1 else self.a[:, None]
        return psi - self.tau * a * (self.grid.laplacian @ psi)


class PrimalStepSolver:
    """Reusable solver for ``(D_c - tau * Lap * D_a) u = rhs``.

    Substituting ``w = a * u`` gives the SPD system ``(D_{c/a} - tau * Lap) w = rhs``,
    an M-matrix, so nonnegative data give nonnegative solutions.
    """

    def __init__(self, grid, a, c, tau, method="direct"):
        if not tau > 0:
            raise InvalidParameterError(f"tau must be positive, got {tau}")
        self.grid = grid
        self.a = _positive(grid, a, "coefficient a")
        c = check_field(grid, c, "coefficient c")
        if not np.all(c > 0):
            raise InvalidParameterError("coefficient c must be positive everywhere")
        self.c = c
        self.tau = float(tau)
        matrix = sp.diags(self.c / self.a) - self.tau * grid.laplacian
        self._solver = _SPDSolver(matrix, method)

    def solve(self, rhs):
        rhs = check_field(self.grid, rhs, "rhs")
        w = self._solver.solve(rhs)
        return w / (self.a if w.ndim == 1 else self.a[:, None])

    def apply(self, u):
        a = self.a if u.ndim == 1 else self.a[:, None]
        c = self.c if u.ndim == 1 else self.c[:, None]
        return c * u - self.tau * (self.grid.laplacian @ (a * u))


def solve_dual_helmholtz(grid, a, tau, rhs, method="direct"):
    """Solve ``(Id - tau * D_a * Lap) psi = rhs`` (one backward dual step)."""
    return DualStepSolver(grid, a, tau, method).solve(rhs)


def solve_primal_helmholtz(grid, a, c, tau, rhs, method="direct"):
    """Solve ``(D_c - tau * Lap * D_a) u = rhs`` (one linearised Rothe step)."""
    return PrimalStepSolver(grid, a, c, tau, method).solve(rhs)
