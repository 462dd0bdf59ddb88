"""Cross-diffusion systems in Laplace form and sampled checks of their structure.

A model is described pointwise: every callable takes a state array ``U`` of
shape ``(I, M)`` (``I`` species, ``M`` points) and returns arrays with the
point axis last. The reaction is split as ``R_i = r_plus_i - u_i * r_minus_i``
with both parts nonnegative.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import xlogy

from .exceptions import DomainError, InvalidParameterError, SolverError

FD_STEP = 1e-6


def _as_state(U, species):
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[0] != species:
        raise InvalidParameterError(f"state has {U.shape[0]} species, model has {species}")
    return U


def _fd_jacobian(fun, U):
    """Central finite-difference Jacobian d fun_i / d u_j, shape ``(I, I, M)``."""
    I, M = U.shape
    out = np.empty((I, I, M))
    for j in range(I):
        step = FD_STEP * np.maximum(1.0, np.abs(U[j]))
        lo = np.maximum(U[j] - step, 0.0)
        hi = U[j] + step
        Up, Um = U.copy(), U.copy()
        Up[j], Um[j] = hi, lo
        out[:, j, :] = (fun(Up) - fun(Um)) / (hi - lo)
    return out


@dataclass(frozen=True)
class ModelSpec:
    """A cross-diffusion reaction system ``d_t u_i - Lap(p_i(U) u_i) = R_i(U)``.

    ``pressure_jacobian``, ``entropy_grad`` and ``entropy_hess`` may be left
    as ``None``; finite differences are used instead. ``bounds`` is
    ``(a, b)`` with ``b = inf`` for unbounded pressures. ``uniform_lower``
    returns the diagonal ``f_i(u_i)`` of the uniform-entropy lower bound,
    or is ``None`` when the model declares none.
    """

    name: str
    species: int
    pressure: Callable
    r_minus: Callable
    r_plus: Callable
    entropy: Callable
    C_R: float
    C_H: float
    bounds: tuple
    entropy_grad: Optional[Callable] = None
    entropy_hess: Optional[Callable] = None
    pressure_jacobian: Optional[Callable] = None
    uniform_lower: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    @property
    def bounded(self):
        return np.isfinite(self.bounds[1])

    def A(self, U):
        U = _as_state(U, self.species)
        return self.pressure(U) * U

    def reaction(self, U):
        U = _as_state(U, self.species)
        return self.r_plus(U) - U * self.r_minus(U)

    def dpressure(self, U):
        U = _as_state(U, self.species)
        if self.pressure_jacobian is not None:
            return self.pressure_jacobian(U)
        return _fd_jacobian(self.pressure, U)

    def DA(self, U):
        """Jacobian ``DA[i, j] = d(p_i(U) u_i) / d u_j``, shape ``(I, I, M)``."""
        U = _as_state(U, self.species)
        out = U[:, None, :] * self.dpressure(U)
        idx = np.arange(self.species)
        out[idx, idx, :] += self.pressure(U)
        return out

    def dreaction(self, U):
        U = _as_state(U, self.species)
        return _fd_jacobian(self.reaction, U)

    def grad_entropy(self, U):
        U = _as_state(U, self.species)
        if self.entropy_grad is not None:
            return self.entropy_grad(U)
        return _fd_jacobian(lambda V: self.entropy(V)[None, :], U)[0]

    def hess_entropy(self, U):
        U = _as_state(U, self.species)
        if self.entropy_hess is not None:
            return self.entropy_hess(U)
        return _fd_jacobian(self.grad_entropy, U)

    def dissipation_matrix(self, U):
        """``D^2 H(U) DA(U)`` at each point, shape ``(I, I, M)``."""
        return np.einsum("ikm,kjm->ijm", self.hess_entropy(U), self.DA(U))


# -- entropy building blocks -------------------------------------------------


def _boltzmann(s):
    return xlogy(s, s) - s + 1.0


def _power_h(s, beta):
    if beta == 1.0:
        return _boltzmann(s)
    return (s**beta - beta * s + beta - 1.0) / (beta * (beta - 1.0))


def _power_dh(s, beta):
    if beta == 1.0:
        return np.log(s)
    return (s ** (beta - 1.0) - 1.0) / (beta - 1.0)


def _bounded_h(s):
    return xlogy(s, 2.0 * s / (1.0 + s)) + (1.0 - s) / 2.0


def _bounded_dh(s):
    return np.log(2.0 * s / (1.0 + s)) + 1.0 / (1.0 + s) - 0.5


def _bounded_d2h(s):
    return 1.0 / (s * (1.0 + s) ** 2)


def _diag(*entries):
    I = len(entries)
    out = np.zeros((I, I) + np.shape(entries[0]))
    for i, e in enumerate(entries):
        out[i, i] = e
    return out


def _stack(*rows):
    return np.array([np.array(r, dtype=float) for r in rows])


# -- built-in systems --------------------------------------------------------

DEFAULTS = {
    "skt": dict(d1=1.0, d2=1.0, a11=0.0, a12=1.0, a21=1.0, a22=0.0,
                R1=1.0, R2=1.0, r11=1.0, r12=1.0, r21=1.0, r22=1.0),
    "skt_concave": dict(d1=1.0, d2=1.0, alpha=0.5, beta=0.5),
    "bounded_quadratic": dict(d1=1.0, d2=1.0),
    "bounded_superquadratic": dict(d1=1.0, d2=1.0),
    "scalar_heat": dict(m=1.0),
}

# Entropy-compatibility constants of the two bounded systems; checked on
# samples by check_structure and in the test suite.
BOUNDED_C_H = 1.0


def _skt(P):
    d1, d2 = P["d1"], P["d2"]
    a11, a12, a21, a22 = P["a11"], P["a12"], P["a21"], P["a22"]
    g1, g2 = P["R1"], P["R2"]
    r11, r12, r21, r22 = P["r11"], P["r12"], P["r21"], P["r22"]
    w1 = 1.0 / a12 if a12 > 0 else 1.0
    w2 = 1.0 / a21 if a21 > 0 else 1.0

    def pressure(U):
        u, v = U
        return _stack(d1 + a11 * u + a12 * v, d2 + a21 * u + a22 * v)

    def dpressure(U):
        one = np.ones_like(U[0])
        return np.array([[a11 * one, a12 * one], [a21 * one, a22 * one]])

    def entropy(U):
        return w1 * _boltzmann(U[0]) + w2 * _boltzmann(U[1])

    def grad(U):
        return _stack(w1 * np.log(U[0]), w2 * np.log(U[1]))

    def hess(U):
        return _diag(w1 / U[0], w2 / U[1])

    def lower(U):
        return _stack(d1 * w1 / U[0], d2 * w2 / U[1])

    C_H = max(g1, g2, g1 * w1 + (w1 * r11 + w2 * r21) / np.e,
              g2 * w2 + (w1 * r12 + w2 * r22) / np.e)
    return ModelSpec(
        "skt", 2, pressure,
        r_minus=lambda U: _stack(r11 * U[0] + r12 * U[1], r21 * U[0] + r22 * U[1]),
        r_plus=lambda U: _stack(g1 * U[0], g2 * U[1]),
        entropy=entropy, entropy_grad=grad, entropy_hess=hess,
        pressure_jacobian=dpressure, uniform_lower=lower,
        C_R=max(g1, g2, 0.0), C_H=float(C_H), bounds=(min(d1, d2), np.inf), params=P,
    )


def _skt_concave(P):
    d1, d2, alpha, beta = P["d1"], P["d2"], P["alpha"], P["beta"]
    if alpha <= 0 or beta <= 0:
        raise InvalidParameterError("alpha and beta must be positive")
    if alpha * beta > 1:
        raise InvalidParameterError(f"alpha * beta = {alpha * beta} > 1 has no entropy structure")

    def pressure(U):
        u, v = U
        return _stack(d1 + v**alpha, d2 + u**beta)

    def dpressure(U):
        u, v = U
        zero = np.zeros_like(u)
        return np.array([[zero, alpha * v ** (alpha - 1.0)], [beta * u ** (beta - 1.0), zero]])

    # Weights beta, alpha make D^2H DA symmetric; positivity then needs alpha*beta <= 1.
    def entropy(U):
        return beta * _power_h(U[0], beta) + alpha * _power_h(U[1], alpha)

    def grad(U):
        return _stack(beta * _power_dh(U[0], beta), alpha * _power_dh(U[1], alpha))

    def hess(U):
        return _diag(beta * U[0] ** (beta - 2.0), alpha * U[1] ** (alpha - 2.0))

    def lower(U):
        return _stack(beta * d1 * U[0] ** (beta - 2.0), alpha * d2 * U[1] ** (alpha - 2.0))

    C_H = beta / abs(1.0 - beta) if beta != 1.0 else 1.0
    return ModelSpec(
        "skt_concave", 2, pressure,
        r_minus=lambda U: _stack(U[0] + U[1], np.zeros_like(U[1])),
        r_plus=lambda U: _stack(U[0], np.zeros_like(U[1])),
        entropy=entropy, entropy_grad=grad, entropy_hess=hess,
        pressure_jacobian=dpressure, uniform_lower=lower,
        C_R=1.0, C_H=float(C_H), bounds=(min(d1, d2), np.inf), params=P,
    )


def _bounded(P, superquadratic):
    d1, d2 = P["d1"], P["d2"]
    if d1 <= 0 or d2 <= 0:
        raise InvalidParameterError("d1 and d2 must be positive")
    a = min(d1, d2)

    def pressure(U):
        u, v = U
        return _stack(d1 + v / (1.0 + v), d2 + u / (1.0 + u))

    def dpressure(U):
        u, v = U
        zero = np.zeros_like(u)
        return np.array([[zero, 1.0 / (1.0 + v) ** 2], [1.0 / (1.0 + u) ** 2, zero]])

    def r_minus(U):
        u, v = U
        loss_u = xlogy(u, 1.0 + u) if superquadratic else u
        return _stack(loss_u + v, u + v)

    def entropy(U):
        return _bounded_h(U[0]) + _bounded_h(U[1])

    def grad(U):
        return _stack(_bounded_dh(U[0]), _bounded_dh(U[1]))

    def hess(U):
        return _diag(_bounded_d2h(U[0]), _bounded_d2h(U[1]))

    def lower(U):
        return _stack(a * _bounded_d2h(U[0]), a * _bounded_d2h(U[1]))

    name = "bounded_superquadratic" if superquadratic else "bounded_quadratic"
    return ModelSpec(
        name, 2, pressure, r_minus=r_minus, r_plus=lambda U: U.copy(),
        entropy=entropy, entropy_grad=grad, entropy_hess=hess,
        pressure_jacobian=dpressure, uniform_lower=lower,
        C_R=1.0, C_H=BOUNDED_C_H, bounds=(a, max(d1, d2) + 1.0), params=P,
    )


def _scalar_heat(P):
    m = P["m"]
    if m <= 0:
        raise InvalidParameterError("m must be positive")
    zero = lambda U: np.zeros_like(U)  # noqa: E731
    return ModelSpec(
        "scalar_heat", 1, pressure=lambda U: np.full_like(U, m),
        r_minus=zero, r_plus=zero,
        entropy=lambda U: _boltzmann(U[0]),
        entropy_grad=lambda U: np.log(U),
        entropy_hess=lambda U: (1.0 / U)[None],
        pressure_jacobian=lambda U: np.zeros((1,) + U.shape),
        uniform_lower=lambda U: m / U,
        C_R=0.0, C_H=0.0, bounds=(m, m), params=P,
    )


_BUILDERS = {
    "skt": _skt,
    "skt_concave": _skt_concave,
    "bounded_quadratic": lambda P: _bounded(P, False),
    "bounded_superquadratic": lambda P: _bounded(P, True),
    "scalar_heat": _scalar_heat,
}

BUILTIN_MODELS = tuple(_BUILDERS)


def builtin_model(name, params=None):
    """Build one of the registered systems, overriding default parameters."""
    if name not in _BUILDERS:
        raise InvalidParameterError(f"unknown model {name!r}; choose from {BUILTIN_MODELS}")
    P = dict(DEFAULTS[name])
    for key, value in (params or {}).items():
        if key not in P:
            raise InvalidParameterError(f"model {name!r} has no parameter {key!r}")
        P[key] = float(value)
    return _BUILDERS[name](P)


def eval_model_at(model, u_point, derivatives=True):
    """Evaluate every pointwise object of ``model`` at one state vector.

    Entropy derivatives and ``DA`` need a strictly positive point; pass
    ``derivatives=False`` on the boundary of the orthant.
    """
    u = np.asarray(u_point, dtype=float).reshape(model.species, 1)
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise DomainError(f"state {u.ravel()} must be finite and nonnegative")
    out = {
        "pressures": model.pressure(u)[:, 0],
        "reactions": model.reaction(u)[:, 0],
        "entropy": float(model.entropy(u)[0]),
    }
    if derivatives:
        if np.any(u <= 0):
            raise DomainError("derivatives are only defined at strictly positive states")
        out["entropy_gradient"] = model.grad_entropy(u)[:, 0]
        out["entropy_hessian"] = model.hess_entropy(u)[:, :, 0]
        out["DA"] = model.DA(u)[:, :, 0]
    return out


def invert_A(model, w, tol=1e-12, max_iter=200):
    """Solve ``A(U) = w`` for ``U >= 0`` with damped Newton iterations."""
    w = np.asarray(w, dtype=float).reshape(model.species)
    if np.any(w < 0):
        raise DomainError("w must be nonnegative")
    active = w > 0
    U = np.zeros(model.species)
    if not active.any():
        return U
    U[active] = w[active] / model.pressure(w[:, None])[active, 0]
    U[active] = np.maximum(U[active], 1e-300)
    scale = np.linalg.norm(w)

    def resid(V):
        return model.A(V[:, None])[:, 0] - w

    r = resid(U)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * scale:
            return U
        J = model.DA(U[:, None])[:, :, 0][np.ix_(active, active)]
        step = np.zeros_like(U)
        step[active] = np.linalg.solve(J, r[active])
        lam = 1.0
        trial, rt = U, r
        while lam > 1e-12:
            trial = U - lam * step
            if np.all(trial[active] > 0):
                rt = resid(trial)
                if np.linalg.norm(rt) < np.linalg.norm(r) or lam < 1e-3:
                    break
            trial, rt = U, r
            lam *= 0.5
        U, r = trial, rt
    if np.linalg.norm(r) <= 1e-10 * scale:
        return U
    raise SolverError(
        f"inverting A did not converge for w={w}; A may not be a homeomorphism",
        best_residual=float(np.linalg.norm(r) / scale),
    )


# -- sampled structure checks ------------------------------------------------


@dataclass
class HypothesisRecord:
    hypothesis: str
    passed: Optional[bool]
    margin: Optional[float]
    witness: Optional[list]
    notice: str = ""

    def to_dict(self):
        return {"hypothesis": self.hypothesis, "pass": self.passed,
                "margin": self.margin, "witness": self.witness, "notice": self.notice}


@dataclass
class StructureReport:
    model: str
    sample_count: int
    box_size: float
    records: list

    @property
    def passed(self):
        return all(r.passed is not False for r in self.records)

    def __getitem__(self, name):
        for r in self.records:
            if r.hypothesis == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return {"model": self.model, "sample_count": self.sample_count,
                "box_size": self.box_size, "pass": self.passed,
                "records": [r.to_dict() for r in self.records]}


def _relative_gap(rhs, lhs):
    return (rhs - lhs) / (1.0 + np.abs(rhs) + np.abs(lhs))


def _scaled_min_eig(M, shift=None):
    """Smallest eigenvalue of the Jacobi-scaled symmetric part of ``M - shift``.

    Scaling uses the diagonal of ``sym(M)`` so the margin is scale free.
    Returns ``-inf`` where that diagonal is not positive.
    """
    S = 0.5 * (M + np.swapaxes(M, 0, 1))
    d = np.einsum("iim->im", S)
    X = S.copy()
    if shift is not None:
        idx = np.arange(M.shape[0])
        X[idx, idx, :] -= shift
    good = np.all(d > 0, axis=0)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    Xs = X * inv[:, None, :] * inv[None, :, :]
    eig = np.linalg.eigvalsh(np.moveaxis(Xs, -1, 0))[:, 0]
    return np.where(good, eig, -np.inf)


def _record(name, margins, U, tol, strict=False):
    margins = np.asarray(margins, dtype=float)
    k = int(np.nanargmin(margins))
    worst = float(margins[k])
    ok = worst > tol if strict else worst >= tol
    return HypothesisRecord(name, bool(ok), worst, U[:, k].tolist())


def sample_states(species, sample_count, box_size, rng, low=1e-6):
    return np.exp(rng.uniform(np.log(low), np.log(box_size), size=(species, sample_count)))


def check_structure(model, sample_count=10_000, box_size=1e3, seed=0):
    """Sample the structural hypotheses of ``model`` on ``(1e-6, box_size]^I``.

    Margins are relative gaps ``(rhs - lhs) / (1 + |rhs| + |lhs|)`` for scalar
    inequalities and Jacobi-scaled smallest eigenvalues for matrix ones.
    """
    if sample_count < 1:
        raise InvalidParameterError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    U = sample_states(model.species, sample_count, box_size, rng)
    I = model.species
    records = []

    p = model.pressure(U)
    rm, rp = model.r_minus(U), model.r_plus(U)
    records.append(_record("nonnegativity", np.min(np.vstack([p, rm, rp]), axis=0), U, -1e-14))

    a, b = model.bounds
    if np.isfinite(b):
        gap = np.minimum(p - a, b - p).min(axis=0)
        records.append(_record("pressure_bounds", gap, U, -1e-12))
    else:
        records.append(HypothesisRecord("pressure_bounds", None, None, None,
                                        "pressures are unbounded above"))

    R = model.reaction(U)
    total = U.sum(axis=0)
    records.append(_record("masscontrol",
                           _relative_gap(model.C_R * (1 + total), R.sum(axis=0)), U, -1e-12))

    # Quasi-positivity: R_i >= 0 where u_i = 0.
    qp = np.full(sample_count, np.inf)
    for i in range(I):
        Z = U.copy()
        Z[i] = 0.0
        qp = np.minimum(qp, model.reaction(Z)[i])
    records.append(_record("quasi_positivity", qp, U, -1e-14))

    H = model.entropy(U)
    records.append(_record("entropy_nonnegative", H, U, -1e-12))
    records.append(_record("entropy_convex", _scaled_min_eig(model.hess_entropy(U)), U, -1e-10))

    M = model.dissipation_matrix(U)
    records.append(_record("entropy_dissip", _scaled_min_eig(M), U, 0.0, strict=True))

    prod = np.sum(model.grad_entropy(U) * R, axis=0)
    records.append(_record("entropy_compatible",
                           _relative_gap(model.C_H * (1 + total + H), prod), U, -1e-12))

    if model.uniform_lower is not None:
        records.append(_record("entropy_uniform",
                               _scaled_min_eig(M, model.uniform_lower(U)), U, -1e-10))
    else:
        records.append(HypothesisRecord("entropy_uniform", None, None, None,
                                        "skipped: model declares no lower-bound functions"))
    return StructureReport(model.name, sample_count, box_size, records)


@dataclass
class GrowthReport:
    model: str
    p: float
    radii: list
    ratios: list
    slope: float
    trend: str

    @property
    def decreasing(self):
        return self.trend == "decreasing"

    def to_dict(self):
        return {"model": self.model, "p": self.p, "radii": self.radii,
                "ratios": self.ratios, "slope": self.slope, "trend": self.trend}


def _safe_norm(X):
    """Column Euclidean norms without overflow of the squares."""
    scale = np.abs(X).max(axis=0)
    safe = np.where(scale > 0, scale, 1.0)
    return scale * np.linalg.norm(X / safe, axis=0)


def check_reaction_growth(model, p, sample_count=4000, radii=None, seed=0):
    """Track ``max |R(U)| / (1 + |U|^p)`` over shells ``r_{k-1} <= |U| <= r_k``.

    The trend is ``"decreasing"`` when the log-log slope of the shell maxima
    is negative and the last maximum is below the first, ``"zero"`` when
    the reaction vanishes, and ``"non-decreasing"`` otherwise.
    """
    if not p > 1:
        raise InvalidParameterError(f"p must be > 1, got {p}")
    radii = list(radii) if radii is not None else [10.0**k for k in range(7)]
    rng = np.random.default_rng(seed)
    I = model.species
    ratios = []
    for r0, r1 in zip(radii[:-1], radii[1:]):
        s = np.exp(rng.uniform(np.log(r0), np.log(r1), size=sample_count))
        d = np.abs(rng.standard_normal((I, sample_count)))
        fixed = np.hstack([np.eye(I), np.ones((I, 1))])
        d = np.hstack([d, fixed, fixed])
        s = np.concatenate([s, np.full(I + 1, r0), np.full(I + 1, r1)])
        U = s * d / np.linalg.norm(d, axis=0)
        norm = _safe_norm(U)
        ratio = _safe_norm(model.reaction(U)) / (1.0 + norm**p)
        ratios.append(float(ratio.max()))
    shells = np.sqrt(np.array(radii[:-1]) * np.array(radii[1:]))
    if max(ratios) == 0.0:
        return GrowthReport(model.name, float(p), radii, ratios, 0.0, "zero")
    slope = float(np.polyfit(np.log(shells), np.log(np.maximum(ratios, 1e-300)), 1)[0])
    trend = "decreasing" if slope < 0 and ratios[-1] < ratios[0] else "non-decreasing"
    return GrowthReport(model.name, float(p), radii, ratios, slope, trend)
