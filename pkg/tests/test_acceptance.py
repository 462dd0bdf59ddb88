"""Acceptance criteria, one test each.

Every criterion prints a single ``[PASS]``/``[FAIL]`` line. Run this file
directly (``python tests/test_acceptance.py``) for the summary alone.
"""

import time

import numpy as np
import pytest
from scipy.optimize import root

from rothedual.dual import (DualProblem, estimate_K, regularity_ratio, solve_dual,
                            verify_interpolation, verify_perturbation)
from rothedual.estimates import find_admissible_p, verify_discrete_duality
from rothedual.grid import build_grid
from rothedual.models import BUILTIN_MODELS, builtin_model, check_reaction_growth, check_structure
from rothedual.rothe import make_initial_state, monitor_check, refinement_study, run

SLACK = 1e-9


def _timed(limit):
    def wrap(fn):
        def inner():
            t0 = time.perf_counter()
            ok, detail = fn()
            elapsed = time.perf_counter() - t0
            if limit is not None and elapsed >= limit:
                ok = False
                detail += f"; runtime {elapsed:.1f}s exceeds {limit}s"
            return ok, f"{detail} ({elapsed:.2f}s)"
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_timed(10)
def exact_p2_constant():
    """Eigenmode K_hat near 1/m; random forcings never beat 1/m."""
    est = estimate_K(build_grid(1, 256), 1.0, 2.0, 1.0, 1, method="eigenmode")
    eig_ok = est.info["lambda_max_tau"] >= 1e3 and 0.999 <= est.K_hat <= 1 + SLACK
    rnd = estimate_K(build_grid(1, 256), 1.0, 2.0, 1 / 64, 64, method="random", trials=500,
                     seed=2024)
    rnd_ok = max(rnd.ratios) <= 1 + SLACK and len(rnd.ratios) == 500
    return eig_ok and rnd_ok, (f"eigenmode K_hat={est.K_hat:.9f} "
                               f"(lambda_max*tau={est.info['lambda_max_tau']:.3g}); "
                               f"max random ratio={max(rnd.ratios):.9f}")


@_timed(10)
def scaling_identity():
    """Ratio at (m, tau, F) equals ratio at (1, m tau, F) divided by m."""
    g = build_grid(1, 64)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        N = int(rng.integers(1, 9))
        F = rng.standard_normal((N, g.node_count))
        tau = float(rng.uniform(1e-3, 0.5))
        p = float(rng.choice([1.5, 2.0, 3.0]))
        for m in (0.5, 2.0, 4.0):
            pm = DualProblem.constant(g, m, tau, F)
            p1 = DualProblem.constant(g, 1.0, m * tau, F)
            rm = regularity_ratio(solve_dual(pm), pm, p)
            r1 = regularity_ratio(solve_dual(p1), p1, p)
            worst = max(worst, abs(rm - r1 / m) / rm)
    return worst <= 1e-12, f"max relative mismatch {worst:.2e} over 300 pairs"


@_timed(60)
def perturbation_p2():
    """Variable coefficients in [1, 2] at p = 2 with the exact midpoint constant."""
    g = build_grid(1, 64)
    rng = np.random.default_rng(3)
    worst = {"imp_laplace": np.inf, "imp_dt": np.inf}
    ok = True
    for _ in range(200):
        prob = DualProblem(g, 1 / 32, rng.uniform(1, 2, (32, 64)),
                           rng.standard_normal((32, 64)), lower=1.0, upper=2.0)
        rep = verify_perturbation(prob, 2.0, 2 / 3)
        assert rep["imp_laplace"].params["bar_D"] == pytest.approx(1.0)
        for name in worst:
            rec = rep[name]
            ok &= rec.certified and rec.lhs <= rec.rhs * (1 + SLACK)
            worst[name] = min(worst[name], rec.margin / rec.rhs)
    return ok, ", ".join(f"{k} min relative margin {v:.3g}" for k, v in worst.items())


@_timed(60)
def interpolation_dense():
    """Interpolation between p = 2 and q = 6 at r = 3; power method matches SVD at p = 2."""
    rep = verify_interpolation(build_grid(1, 6), 1.0, 1.0, 3, 2.0, 6.0, 3.0)
    K = rep.info["K"]
    interp = K["3.0"] <= np.sqrt(K["2.0"] * K["6.0"]) * 1.02
    gap = rep["power_vs_spectral_p2"].lhs
    return interp and gap <= 1e-8 and rep.passed, (
        f"K3={K['3.0']:.6f} <= 1.02*sqrt(K2*K6)={1.02 * np.sqrt(K['2.0'] * K['6.0']):.6f}; "
        f"|power-SVD|={gap:.2e}")


def _criterion5_run(name="bounded_quadratic"):
    g = build_grid(1, 64)
    m = builtin_model(name, {"d1": 1.0, "d2": 1.0} if name != "scalar_heat" else None)
    U0 = make_initial_state(g, m.species, {"kind": "perturbed",
                                           "values": [0.5] * m.species, "amplitude": 0.5})
    return run(m, g, U0, 1 / 64, 64)


@_timed(120)
def duality_end_to_end():
    """Certified duality bound at p = 2; informational report at p = 2.4."""
    tr = _criterion5_run()
    rep = verify_discrete_duality(tr, 2.0, 2 / 3, C=1.0)
    K24 = estimate_K(build_grid(1, 32), 1.5, 2.4, 1 / 16, 16, method="power")
    info = verify_discrete_duality(tr, 2.4, K24.K_hat, C=1.0, K_method="power")
    ok = (rep.certified and rep.passed and rep.params["bar_D"] == pytest.approx(1.0)
          and not info.certified and info.K_method == "power")
    return ok, (f"p=2: LHS={rep.lhs:.6f} <= RHS={rep.rhs:.6f}; p=2.4 (informational, "
                f"K_hat={K24.K_hat:.4f} power): LHS={info.lhs:.6f}, RHS={info.rhs:.6f}")


@_timed(120)
def rothe_monitors():
    """Monitors on every built-in model with bounded pressures."""
    names = [n for n in BUILTIN_MODELS if np.isfinite(builtin_model(n).bounds[1])]
    details, ok = [], True
    for name in names:
        tr = _criterion5_run(name)
        rep = monitor_check(tr)
        this = (rep.passed and tr.states.min() >= -1e-12 and rep.max_residual <= 1e-10
                and rep.min_dissipation >= -1e-12 * (1 + np.abs(tr.monitors["dissipation"]).max()))
        ok &= this
        details.append(f"{name}:{'ok' if this else 'FAIL'}")
    return ok, ", ".join(details)


def _algebraic(u0, tau, N, superquadratic):
    def fun(x, prev):
        u, v = x
        loss = u * np.log1p(u) if superquadratic else u
        return x - prev - tau * np.array([u * (1 - loss - v), v * (1 - v - u)])

    out = [np.asarray(u0, dtype=float)]
    for _ in range(N):
        sol = root(fun, out[-1], args=(out[-1],), method="hybr", tol=1e-14)
        out.append(sol.x)
    return np.array(out)


@_timed(None)
def spatial_invariance():
    """Constant data follow the algebraic backward Euler recursion."""
    g = build_grid(1, 64)
    worst = 0.0
    for name, sq in (("bounded_quadratic", False), ("bounded_superquadratic", True)):
        U0 = make_initial_state(g, 2, {"kind": "constant", "values": [0.2, 0.7]})
        tr = run(builtin_model(name), g, U0, 1 / 64, 64)
        ref = _algebraic([0.2, 0.7], 1 / 64, 64, sq)
        worst = max(worst, np.abs(tr.states - ref[:, :, None]).max())
    return worst <= 1e-9, f"max deviation {worst:.2e} over 64 steps"


@_timed(60)
def admissible_exponent():
    """An admissible exponent exists for a = 1, b = 2; p = 2 is always admissible."""
    res = find_admissible_p(1.0, 2.0, build_grid(1, 32), 1 / 16, 16, 3.0, 5)
    row2 = res.table[0]
    ok = (res.p_star >= 2 and row2["p"] == 2.0 and row2["admissible"]
          and row2["oscillation_times_K"] <= 1 / 3 + 1e-6)
    return ok, (f"p_star={res.p_star}; p=2 row (b-a)K/2={row2['oscillation_times_K']:.8f}")


@_timed(30)
def structure_suite():
    """Structural hypotheses hold for all built-ins; growth trends as expected."""
    failed = [n for n in BUILTIN_MODELS
              if not check_structure(builtin_model(n), sample_count=10_000).passed]
    q = check_reaction_growth(builtin_model("bounded_quadratic"), 2.5).trend
    sq = check_reaction_growth(builtin_model("bounded_superquadratic"), 2.0).trend
    ok = not failed and q == "decreasing" and sq == "non-decreasing"
    return ok, f"structure failures={failed}; quadratic p=2.5: {q}; superquadratic p=2: {sq}"


@_timed(300)
def refinement_stability():
    """Space-time L2 norms settle under time-step halving."""
    g = build_grid(1, 64)
    m = builtin_model("bounded_superquadratic")
    U0 = make_initial_state(g, 2, {"kind": "perturbed", "values": [0.2, 0.6],
                                   "amplitude": 0.9})
    rep = refinement_study(m, g, U0, 1.0, [1 / 16, 1 / 32, 1 / 64, 1 / 128], p=2.0)
    ok = rep.diffs_decreasing and rep.rel_diffs[-1] < 0.10
    return ok, "relative differences " + ", ".join(f"{d:.3e}" for d in rep.rel_diffs)


CRITERIA = [
    (1, exact_p2_constant), (2, scaling_identity), (3, perturbation_p2),
    (4, interpolation_dense), (5, duality_end_to_end), (6, rothe_monitors),
    (7, spatial_invariance), (8, admissible_exponent), (9, structure_suite),
    (10, refinement_stability),
]


def _line(number, fn, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {fn.__name__}: {detail}"


@pytest.mark.parametrize("number,fn", CRITERIA, ids=[f.__name__ for _, f in CRITERIA])
def test_criterion(number, fn, capsys):
    ok, detail = fn()
    with capsys.disabled():
        print("\n" + _line(number, fn, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = [(n, f, *f()) for n, f in CRITERIA]
    for n, f, ok, detail in results:
        print(_line(n, f, ok, detail))
    raise SystemExit(0 if all(r[2] for r in results) else 1)
