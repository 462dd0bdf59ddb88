"""Implicit Euler (Rothe) time stepping for cross-diffusion systems.

Each step solves, for every species ``i``::

    (u_i^k - u_i^{k-1}) / tau - Lap(p_i(U^k) u_i^k) = R_i(U^k)

States are arrays of shape ``(I, node_count)``.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .exceptions import InvalidParameterError, SolverError
from .grid import PrimalStepSolver

SCHEMES = ("picard", "newton")
ROUNDOFF = 1e3 * np.finfo(float).eps


@dataclass(frozen=True)
class StepOptions:
    scheme: str = "picard"
    tolerance: float = 1e-10
    max_iter: int = 200
    damping: float = 1.0
    linear_solver: str = "direct"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParameterError(f"scheme must be one of {SCHEMES}")
        if not self.tolerance > 0:
            raise InvalidParameterError("tolerance must be positive")
        if not 0 < self.damping <= 1:
            raise InvalidParameterError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise InvalidParameterError("max_iter must be >= 1")


def _lap(grid, X):
    return (grid.laplacian @ X.T).T


def residual_field(model, grid, U, U_prev, tau):
    """Defect of the implicit step, ``U - U_prev - tau (Lap A(U) + R(U))``."""
    return U - U_prev - tau * (_lap(grid, model.A(U)) + model.reaction(U))


def relative_residual(res, U, U_prev):
    scale = max(np.linalg.norm(U_prev), np.linalg.norm(U))
    return float(np.linalg.norm(res) / scale) if scale > 0 else float(np.linalg.norm(res))


def _check_step(model, tau, U_prev):
    if not tau > 0:
        raise InvalidParameterError("tau must be positive")
    if tau * model.C_R > 0.5 or tau * model.C_H > 0.5:
        raise InvalidParameterError(
            f"need tau*C_R <= 1/2 and tau*C_H <= 1/2 (C_R={model.C_R}, C_H={model.C_H}, tau={tau})"
        )
    if np.any(U_prev < 0) or not np.all(np.isfinite(U_prev)):
        raise InvalidParameterError("previous state must be finite and nonnegative")


def _picard_update(model, grid, U, U_prev, tau, linear_solver):
    p = model.pressure(U)
    c = 1.0 + tau * model.r_minus(U)
    rhs = U_prev + tau * model.r_plus(U)
    return np.stack([
        PrimalStepSolver(grid, p[i], c[i], tau, linear_solver).solve(rhs[i])
        for i in range(model.species)
    ])


def _newton_update(model, grid, U, U_prev, tau, res):
    I, n = U.shape
    DA = model.DA(U)
    dR = model.dreaction(U)
    L = grid.laplacian
    blocks = [[(sp.identity(n) if i == j else None) for j in range(I)] for i in range(I)]
    for i in range(I):
        for j in range(I):
            blk = -tau * (L @ sp.diags(DA[i, j]) + sp.diags(dR[i, j]))
            blocks[i][j] = blk if blocks[i][j] is None else blocks[i][j] + blk
    J = sp.bmat(blocks, format="csc")
    return spsolve(J, res.ravel()).reshape(I, n)


def rothe_step(model, grid, U_prev, tau, opts=None):
    """Advance one implicit step; returns ``(U_next, relative_residual, iterations)``.

    Iteration stops once both the relative residual and the relative size
    of the last update are within ``opts.tolerance``, or the residual is at
    rounding level.

    The Picard scheme freezes pressures, the loss rate and the gain at the
    current iterate and solves ``I`` decoupled M-matrix systems, which keeps
    iterates nonnegative. The Newton scheme solves the coupled linearisation
    with a backtracking search that keeps iterates nonnegative and falls back
    to a Picard update when no acceptable step is found.
    """
    opts = opts or StepOptions()
    U_prev = np.asarray(U_prev, dtype=float).reshape(model.species, grid.node_count)
    _check_step(model, tau, U_prev)
    U = U_prev.copy()
    res = residual_field(model, grid, U, U_prev, tau)
    rho = relative_residual(res, U, U_prev)
    best = rho
    # A small residual alone can stop a slowly contracting fixed-point loop
    # early, so the last update must be small as well unless the residual is
    # already at rounding level.
    update = 0.0

    def converged():
        return rho <= opts.tolerance and (update <= opts.tolerance or rho <= ROUNDOFF)

    for it in range(1, opts.max_iter + 1):
        if converged():
            return U, rho, it - 1
        new = None
        if opts.scheme == "newton" and np.all(U > 0):
            delta = _newton_update(model, grid, U, U_prev, tau, res)
            lam = 1.0
            while lam >= 1e-6:
                trial = U - lam * delta
                if np.all(trial >= 0):
                    r_trial = residual_field(model, grid, trial, U_prev, tau)
                    if np.linalg.norm(r_trial) < np.linalg.norm(res):
                        new = trial
                        break
                lam *= 0.5
        if new is None:
            new = _picard_update(model, grid, U, U_prev, tau, opts.linear_solver)
            if opts.damping < 1:
                new = (1 - opts.damping) * U + opts.damping * new
        update = relative_residual(new - U, new, U_prev)
        U = new
        res = residual_field(model, grid, U, U_prev, tau)
        rho = relative_residual(res, U, U_prev)
        best = min(best, rho)
    if converged():
        return U, rho, opts.max_iter
    raise SolverError(f"{opts.scheme} iteration did not converge in {opts.max_iter} iterations",
                      best_residual=best)


# -- trajectories and monitors -----------------------------------------------

MONITOR_COLUMNS = ("k", "t", "mass", "entropy", "dissipation", "duality_partial", "residual")


@dataclass
class RotheTrajectory:
    """States ``U^0..U^N`` and per-step monitors.

    ``dissipation`` uses face differences with face-averaged states;
    ``dissipation_sbp`` is the exact discrete form ``-int grad H(U) . Lap A(U)``
    used by the entropy recursion. The ``*_defect`` entries integrate the
    step residual against 1 and against ``grad H(U^k)``.
    """

    model: object
    grid: object
    tau: float
    states: np.ndarray
    monitors: dict = field(default_factory=dict)
    options: Optional[StepOptions] = None

    @property
    def N(self):
        return self.states.shape[0] - 1

    @property
    def times(self):
        return self.tau * np.arange(self.N + 1)

    def monitor_rows(self):
        rows = []
        for k in range(self.N + 1):
            row = {"k": k, "t": float(self.times[k])}
            for key in MONITOR_COLUMNS[2:]:
                row[key] = float(self.monitors[key][k])
            rows.append(row)
        return rows


def face_dissipation(model, grid, U):
    """``int <grad U, D^2H DA grad U>`` from face differences and face-averaged states."""
    I = model.species
    V = U.reshape((I,) + grid.shape)
    total = 0.0
    for axis in range(grid.dim):
        ax = axis + 1
        hi = np.take(V, np.arange(1, grid.n), axis=ax)
        lo = np.take(V, np.arange(grid.n - 1), axis=ax)
        g = ((hi - lo) / grid.h).reshape(I, -1)
        mid = np.maximum(0.5 * (hi + lo).reshape(I, -1), 1e-300)
        M = model.dissipation_matrix(mid)
        q = np.einsum("im,ijm,jm->m", g, M, g)
        q = np.where(np.all(g == 0, axis=0), 0.0, q)
        total += grid.weight * q.sum()
    return float(total)


def _grad_entropy_safe(model, U):
    return model.grad_entropy(np.maximum(U, 1e-300))


def _step_monitors(model, grid, U, U_prev, tau):
    out = {
        "mass": grid.weight * U.sum(),
        "entropy": grid.weight * model.entropy(U).sum(),
        "dissipation": face_dissipation(model, grid, U),
    }
    dH = _grad_entropy_safe(model, U)
    out["dissipation_sbp"] = -grid.weight * np.sum(dH * _lap(grid, model.A(U)))
    out["duality_density"] = grid.weight * np.sum(model.A(U).sum(axis=0) * U.sum(axis=0))
    if U_prev is not None:
        res = residual_field(model, grid, U, U_prev, tau)
        out["mass_defect"] = grid.weight * res.sum()
        out["entropy_defect"] = grid.weight * np.sum(dH * res)
    else:
        out["mass_defect"] = out["entropy_defect"] = 0.0
    return out


def validate_initial_state(model, grid, U0):
    U0 = np.asarray(U0, dtype=float)
    if U0.shape != (model.species, grid.node_count):
        raise InvalidParameterError(
            f"U0 must have shape ({model.species}, {grid.node_count}), got {U0.shape}")
    if np.any(U0 < 0) or not np.all(np.isfinite(U0)):
        raise InvalidParameterError("U0 must be finite and nonnegative")
    if np.any(U0.sum(axis=1) <= 0):
        raise InvalidParameterError("every species needs a positive integral")
    return U0


def run(model, grid, U0, tau, N, opts=None, allow_zero=False):
    """Run ``N`` Rothe steps from ``U0`` and record monitors.

    ``allow_zero`` lifts the positive-integral requirement on ``U0`` (the
    zero state is a valid trivial trajectory for gain-free reactions).
    """
    opts = opts or StepOptions()
    U0 = np.asarray(U0, dtype=float)
    if allow_zero:
        if U0.shape != (model.species, grid.node_count) or np.any(U0 < 0):
            raise InvalidParameterError("U0 has the wrong shape or negative entries")
    else:
        U0 = validate_initial_state(model, grid, U0)
    N = int(N)
    if N < 1:
        raise InvalidParameterError("N must be >= 1")
    states = np.empty((N + 1,) + U0.shape)
    states[0] = U0
    keys = ("mass", "entropy", "dissipation", "dissipation_sbp", "duality_density",
            "mass_defect", "entropy_defect")
    mon = {k: np.zeros(N + 1) for k in keys}
    mon["residual"] = np.zeros(N + 1)
    mon["iterations"] = np.zeros(N + 1, dtype=int)
    for key, val in _step_monitors(model, grid, U0, None, tau).items():
        mon[key][0] = val
    for k in range(1, N + 1):
        try:
            U, rho, iters = rothe_step(model, grid, states[k - 1], tau, opts)
        except SolverError as err:
            err.step = k
            raise SolverError(f"step {k}: {err}", err.best_residual, step=k) from err
        states[k] = U
        mon["residual"][k] = rho
        mon["iterations"][k] = iters
        for key, val in _step_monitors(model, grid, U, states[k - 1], tau).items():
            mon[key][k] = val
    dens = mon.pop("duality_density")
    dens[0] = 0.0
    mon["duality_partial"] = np.cumsum(tau * dens)
    return RotheTrajectory(model, grid, float(tau), states, mon, opts)


@dataclass
class MonitorReport:
    """Per-step checks of the mass and entropy recursions.

    Each recursion is stored as arrays ``lhs``, ``rhs`` over ``k = 1..N``;
    ``violations`` lists ``(check, k)`` pairs.
    """

    mass_lhs: np.ndarray
    mass_rhs: np.ndarray
    entropy_lhs: np.ndarray
    entropy_rhs: np.ndarray
    min_state: float
    min_dissipation: float
    max_residual: float
    duality_sum: float
    tolerance: float
    violations: list

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {
            "pass": self.passed,
            "min_state": self.min_state,
            "min_dissipation": self.min_dissipation,
            "max_residual": self.max_residual,
            "duality_sum": self.duality_sum,
            "mass_margin_min": float(np.min(self.mass_rhs - self.mass_lhs)),
            "entropy_margin_min": float(np.min(self.entropy_rhs - self.entropy_lhs)),
            "violations": [{"check": c, "k": k} for c, k in self.violations],
        }


def monitor_check(trajectory, nonneg_tol=1e-12):
    """Check the one-step mass and entropy inequalities along a trajectory.

    Mass: ``m_k <= (m_{k-1} + tau C_R |Omega|) / (1 - tau C_R)``.
    Entropy: ``(1 - tau C_H) e_k + tau d_k <= e_{k-1} + tau C_H (|Omega| + m_k)``.
    Both carry a slack of ten times the integrated step residual plus a
    rounding allowance.
    """
    tr = trajectory
    model, grid, tau = tr.model, tr.grid, tr.tau
    mon = tr.monitors
    omega = grid.measure
    m, e = mon["mass"], mon["entropy"]
    eps = 1e-12
    cr, ch = model.C_R, model.C_H

    mass_lhs = m[1:]
    mass_rhs = ((m[:-1] + tau * cr * omega + 10 * np.abs(mon["mass_defect"][1:]))
                / (1 - tau * cr) + eps * (omega + m[:-1] + m[1:]))
    d = mon["dissipation_sbp"][1:]
    ent_lhs = (1 - tau * ch) * e[1:] + tau * d
    ent_rhs = (e[:-1] + tau * ch * (omega + m[1:]) + 10 * np.abs(mon["entropy_defect"][1:])
               + eps * (omega + np.abs(e[:-1]) + np.abs(e[1:]) + tau * np.abs(d) + m[1:]))

    violations = [("mass", k + 1) for k in np.flatnonzero(mass_lhs > mass_rhs)]
    violations += [("entropy", k + 1) for k in np.flatnonzero(ent_lhs > ent_rhs)]
    min_state = float(tr.states.min())
    if min_state < -nonneg_tol:
        bad = np.flatnonzero(tr.states.reshape(tr.N + 1, -1).min(axis=1) < -nonneg_tol)
        violations += [("nonnegativity", int(k)) for k in bad]
    diss = mon["dissipation"]
    dscale = eps * (1 + np.abs(diss).max())
    violations += [("dissipation_sign", int(k)) for k in np.flatnonzero(diss < -dscale)]
    tol = tr.options.tolerance if tr.options else 1e-10
    violations += [("residual", int(k)) for k in np.flatnonzero(mon["residual"] > tol)]
    duality_sum = float(mon["duality_partial"][-1])
    if not np.isfinite(duality_sum):
        violations.append(("duality_sum", tr.N))
    return MonitorReport(mass_lhs, mass_rhs, ent_lhs, ent_rhs, min_state, float(diss.min()),
                         float(mon["residual"].max()), duality_sum, tol, violations)


@dataclass
class RefinementReport:
    taus: list
    norms: list
    rel_diffs: list
    p: float
    T: float

    @property
    def diffs_decreasing(self):
        d = self.rel_diffs
        return all(b < a for a, b in zip(d[:-1], d[1:]))

    def rows(self):
        return [{"tau": t, "norm": n, "rel_diff": (self.rel_diffs[i - 1] if i else "")}
                for i, (t, n) in enumerate(zip(self.taus, self.norms))]

    def to_dict(self):
        return {"p": self.p, "T": self.T, "taus": self.taus, "norms": self.norms,
                "rel_diffs": self.rel_diffs, "diffs_decreasing": self.diffs_decreasing}


def spacetime_lp(trajectory, p):
    """``||U^tau||_{L^p(Q_T)}`` of the step function built from ``U^1..U^N``."""
    tr = trajectory
    X = np.abs(tr.states[1:]) ** p
    return float((tr.tau * tr.grid.weight * X.sum()) ** (1.0 / p))


def refinement_study(model, grid, U0, T, tau_list, p=2.0, opts=None):
    taus = [float(t) for t in tau_list]
    if not taus:
        raise InvalidParameterError("tau_list is empty")
    if any(b >= a for a, b in zip(taus[:-1], taus[1:])):
        raise InvalidParameterError("tau_list must be strictly decreasing")
    norms = []
    for tau in taus:
        N = int(round(T / tau))
        if N < 1 or abs(N * tau - T) > 1e-9 * T:
            raise InvalidParameterError(f"tau={tau} does not divide T={T}")
        norms.append(spacetime_lp(run(model, grid, U0, tau, N, opts), p))
    rel = [abs(b - a) / abs(b) if b else 0.0 for a, b in zip(norms[:-1], norms[1:])]
    return RefinementReport(taus, norms, rel, float(p), float(T))


# -- initial data ------------------------------------------------------------


def make_initial_state(grid, species, init):
    """Build ``U0`` from a dict such as ``{"kind": "constant", "values": [0.5, 0.5]}``.

    Kinds: ``constant`` (``values``), ``perturbed`` (``values`` plus
    ``amplitude`` times a cosine along the first axis), ``gaussian``
    (``amplitude``, ``width``, ``center``, ``background``) and ``file``
    (``path`` to a JSON list of fields or a CSV with ``node_index`` and one
    column per species).
    """
    kind = init.get("kind", "constant")
    x = grid.coordinates()
    if kind in ("constant", "perturbed"):
        vals = np.broadcast_to(np.asarray(init.get("values", [1.0]), dtype=float), (species,))
        U = np.repeat(vals[:, None], grid.node_count, axis=1).copy()
        if kind == "perturbed":
            amp = np.broadcast_to(np.asarray(init.get("amplitude", 0.25), dtype=float), (species,))
            modes = init.get("mode", 1)
            U += amp[:, None] * vals[:, None] * np.cos(modes * np.pi * x[0] / grid.length)[None, :]
        return U
    if kind == "gaussian":
        amp = np.broadcast_to(np.asarray(init.get("amplitude", 1.0), dtype=float), (species,))
        width = float(init.get("width", 0.1 * grid.length))
        center = init.get("center", [0.5 * grid.length] * grid.dim)
        back = np.broadcast_to(np.asarray(init.get("background", 0.1), dtype=float), (species,))
        r2 = sum((xi - ci) ** 2 for xi, ci in zip(x, np.atleast_1d(center)))
        bump = np.exp(-r2 / (2 * width**2))
        return back[:, None] + amp[:, None] * bump[None, :]
    if kind == "file":
        path = init["path"]
        if str(path).endswith(".json"):
            with open(path) as fh:
                data = np.asarray(json.load(fh), dtype=float)
        else:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1:].T
        return np.atleast_2d(data).reshape(species, grid.node_count)
    raise InvalidParameterError(f"unknown initial-data kind {kind!r}")
