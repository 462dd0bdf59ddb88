"""Improved duality estimate for Rothe trajectories and admissibility searches."""

from dataclasses import dataclass, field

import numpy as np

from .dual import bar_D, estimate_K
from .exceptions import AdmissibilityError, DomainError, InvalidParameterError
from .grid import build_grid, lp_norm
from .models import check_reaction_growth
from .reports import EstimateReport, conjugate

NONNEG_TOL = 1e-12


def condition_check(a, b, p, K):
    """Admissibility of ``(a, b, p)`` for the constant ``K`` at the midpoint."""
    if not 0 < a <= b:
        raise InvalidParameterError("need 0 < a <= b")
    if not 1 < p < np.inf:
        raise InvalidParameterError("p must lie in (1, inf)")
    if not K > 0:
        raise InvalidParameterError("K must be positive")
    osc = 0.5 * (b - a) * K
    ok = bool(osc < 1)
    return {"admissible": ok, "oscillation_times_K": osc,
            "bar_D": bar_D(a, b, p, K) if ok else None}


def duality_sides(trajectory, p, K, C, transformed=False):
    """Both sides of the duality bound for ``u^k = sum_i u_i^k``.

    With ``transformed`` the sides are computed for ``v^k = (1 - C tau)^k u^k``,
    whose bound carries no ``(1 - C tau)^{-N}`` prefactor.
    """
    tr = trajectory
    a, b = tr.model.bounds
    grid, tau, N = tr.grid, tr.tau, tr.N
    pc = conjugate(p)
    u = tr.states.sum(axis=1)
    if transformed:
        u = u * ((1 - C * tau) ** np.arange(N + 1))[:, None]
    lhs = (tau * grid.weight * np.sum(np.abs(u[1:]) ** pc)) ** (1 / pc)
    Dbar = bar_D(a, b, p, K)
    rhs = ((lp_norm(grid, u[0], pc) + C * N * tau * grid.measure ** (1 / pc))
           * (1 + Dbar / (1 - C * tau)) * (N * tau) ** (1 / pc))
    if not transformed:
        rhs *= (1 - C * tau) ** (-N)
    return float(lhs), float(rhs), Dbar


def verify_discrete_duality(trajectory, p, K, C=None, K_method=None, certified=None):
    """Assemble the ``L^{p'}`` duality bound on the total density of a trajectory.

    ``(a, b)`` are the model's pressure bounds and ``C`` defaults to ``C_R``.
    The record is certified only at ``p = 2`` with ``K >= 2 / (a + b)``, the
    exact constant there; otherwise it is informational.
    """
    tr = trajectory
    a, b = tr.model.bounds
    if not np.isfinite(b):
        raise AdmissibilityError(f"model {tr.model.name!r} has unbounded pressures")
    if tr.states.min() < -NONNEG_TOL:
        raise DomainError("trajectory has negative entries")
    C = tr.model.C_R if C is None else float(C)
    if not 0 <= C * tr.tau < 1:
        raise InvalidParameterError("need 0 <= C tau < 1")
    cond = condition_check(a, b, p, K)
    if not cond["admissible"]:
        raise AdmissibilityError(f"(b - a) K / 2 = {cond['oscillation_times_K']} >= 1")
    lhs, rhs, Dbar = duality_sides(tr, p, K, C)
    lhs_v, rhs_v, _ = duality_sides(tr, p, K, C, transformed=True)
    if certified is None:
        certified = p == 2 and K >= 2.0 / (a + b) * (1 - 1e-12)
    shrink = (1 - C * tr.tau) ** tr.N
    params = dict(a=a, b=b, C=C, tau=tr.tau, N=tr.N, measure=tr.grid.measure, bar_D=Dbar,
                  lhs_transformed=lhs_v, rhs_transformed=rhs_v,
                  rhs_route_gap=abs(rhs * shrink - rhs_v) / rhs_v)
    return EstimateReport("dualite_discrete", p, lhs, rhs, certified=bool(certified),
                          K_hat=K, K_method=K_method or ("exact" if p == 2 else None),
                          params=params)


@dataclass
class AdmissibleSearch:
    p_star: float
    table: list
    a: float
    b: float
    info: dict = field(default_factory=dict)

    def csv_rows(self):
        return [{k: row[k] for k in ("p", "K_hat", "oscillation_times_K", "admissible")}
                for row in self.table]

    def to_dict(self):
        return {"p_star": self.p_star, "a": self.a, "b": self.b, "table": self.csv_rows(),
                "info": self.info}


def find_admissible_p(a, b, grid, tau, N, p_max, steps=9, method="power", restarts=20, seed=0):
    """Scan ``p`` over ``[2, p_max]`` and return the end of the admissible prefix.

    ``K`` at each ``p`` is estimated for the midpoint coefficient
    ``(a + b) / 2``. Estimates are lower bounds, so admissibility for
    ``p != 2`` is optimistic.
    """
    if not 0 < a <= b:
        raise InvalidParameterError("need 0 < a <= b")
    if not p_max > 2:
        raise InvalidParameterError("p_max must exceed 2")
    m = 0.5 * (a + b)
    table = []
    p_star = 2.0
    prefix = True
    for p in np.linspace(2.0, p_max, max(int(steps), 2)):
        est = estimate_K(grid, m, float(p), tau, N, method=method, restarts=restarts, seed=seed)
        osc = 0.5 * (b - a) * est.K_hat
        ok = bool(osc < 1)
        table.append({"p": float(p), "K_hat": est.K_hat, "oscillation_times_K": osc,
                      "admissible": ok, "certified": est.certified})
        if ok and prefix:
            p_star = float(p)
        prefix = prefix and ok
    info = {"m": m, "method": method, "tau": tau, "N": N, "grid": grid.summary(), "seed": seed}
    return AdmissibleSearch(p_star, table, float(a), float(b), info)


@dataclass
class VerdictReport:
    model: str
    verdict: str
    hypotheses: dict
    p_star: float = None
    growth: dict = None
    search: dict = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {"model": self.model, "verdict": self.verdict, "hypotheses": self.hypotheses,
                "p_star": self.p_star, "growth": self.growth, "search": self.search,
                "notes": self.notes}


def growth_radii(p):
    """Radii ``10^k`` reaching as far as floating point allows for ``|U|^p``."""
    top = int(min(100, 250 // max(p, 1.0)))
    return 10.0 ** np.arange(top + 1)


def growth_vs_estimate(model, p_star=None, grid=None, tau=1 / 16, N=16, p_max=3.0, steps=5,
                       seed=0, sample_count=2000):
    """Combine pressure bounds, admissible exponent and reaction growth into a verdict.

    The growth of ``|R|`` against ``|U|^{p_star}`` is sampled on shells out to
    very large radii, since logarithmic factors only lose to small powers
    far out. The verdict is ``positive`` when bounds hold, some ``p > 2`` is
    admissible and the sampled ratio decreases; ``not-applicable`` for
    unbounded pressures.
    """
    a, b = model.bounds
    if not np.isfinite(b):
        return VerdictReport(model.name, "not-applicable", {"p_iborne": False},
                             notes=["pressures are not bounded above"])
    search = None
    if p_star is None:
        grid = grid or build_grid(1, 32)
        search = find_admissible_p(a, b, grid, tau, N, p_max, steps, seed=seed)
        p_star = search.p_star
    growth = check_reaction_growth(model, p_star, sample_count=sample_count,
                                   radii=growth_radii(p_star), seed=seed)
    hyp = {"p_iborne": True, "condKab": bool(p_star > 2),
           "hypRp": bool(p_star > 2 and growth.trend in ("decreasing", "zero"))}
    notes = []
    if p_star <= 2:
        notes.append("no exponent above 2 found admissible")
    verdict = "positive" if all(hyp.values()) else "negative"
    return VerdictReport(model.name, verdict, hyp, float(p_star), growth.to_dict(),
                         search.to_dict() if search else None, notes)
