import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rothedual.dual import (DualMap, DualProblem, bar_D, boyd_power, dense_pnorm,
                            duality_identity, estimate_K, regularity_ratio, riesz_thorin_bound,
                            solve_dual, verify_interpolation, verify_perturbation)
from rothedual.exceptions import AdmissibilityError, InvalidParameterError, ShapeMismatchError
from rothedual.grid import build_grid, laplacian_eigenmode


def _forcing(grid, N, seed):
    return np.random.default_rng(seed).standard_normal((N, grid.node_count))


def test_zero_and_constant_forcing():
    g = build_grid(1, 16)
    sol = solve_dual(DualProblem.constant(g, 1.3, 0.1, np.zeros((4, 16))))
    assert not sol.psi.any()
    c = np.array([0.5, -1.0, 2.0, 0.25])
    prob = DualProblem(g, 0.1, np.random.default_rng(0).uniform(1, 2, (4, 16)),
                       np.repeat(c[:, None], 16, axis=1))
    sol = solve_dual(prob)
    for k in range(4):
        np.testing.assert_allclose(sol.psi[k], -0.1 * c[k:].sum(), rtol=1e-12)
    np.testing.assert_allclose(sol.lap, 0, atol=1e-9)
    assert not sol.psi[-1].any()
    assert regularity_ratio(sol, prob, 2) == pytest.approx(0, abs=1e-9)


def test_single_mode_closed_form():
    g = build_grid(1, 32)
    phi, lam = laplacian_eigenmode(g, 7)
    m, tau, f = 1.7, 0.05, 2.5
    prob = DualProblem.constant(g, m, tau, f * phi[None, :])
    sol = solve_dual(prob)
    np.testing.assert_allclose(sol.psi[0], -tau * f / (1 + m * -lam * tau) * phi,
                               rtol=1e-10, atol=1e-13)
    for p in (2, 3):
        assert regularity_ratio(sol, prob, p) == pytest.approx(
            -lam * tau / (1 - m * lam * tau), rel=1e-10)


def test_step_residuals():
    g = build_grid(2, 6)
    rng = np.random.default_rng(1)
    prob = DualProblem(g, 0.2, rng.uniform(1, 2, (5, 36)), rng.standard_normal((5, 36)))
    sol = solve_dual(prob)
    L = g.laplacian
    for k in range(5):
        res = (sol.psi[k + 1] - sol.psi[k]) / 0.2 + prob.coefficients[k] * (L @ sol.psi[k]) \
            - prob.forcing[k]
        assert np.linalg.norm(res) <= 1e-11 * (1 + np.linalg.norm(prob.forcing[k]))


def test_problem_validation():
    g = build_grid(1, 4)
    with pytest.raises(ShapeMismatchError):
        DualProblem(g, 0.1, np.ones((2, 4)), np.ones((3, 4)))
    with pytest.raises(InvalidParameterError):
        DualProblem(g, 0.1, np.ones((2, 4)), np.ones((2, 4)), lower=1.5, upper=2.0)
    with pytest.raises(InvalidParameterError):
        DualProblem(g, -0.1, np.ones((2, 4)), np.ones((2, 4)))
    prob = DualProblem.constant(g, 1.0, 0.1, np.zeros((2, 4)))
    with pytest.raises(InvalidParameterError):
        regularity_ratio(solve_dual(prob), prob, 2)


def test_sign_preservation():
    g = build_grid(1, 24)
    rng = np.random.default_rng(2)
    for _ in range(500):
        N = int(rng.integers(1, 6))
        F = -np.abs(rng.standard_normal((N, 24))) * (rng.uniform(size=(N, 24)) < 0.5)
        prob = DualProblem(g, rng.uniform(0.01, 1), rng.uniform(1, 3, (N, 24)), F)
        assert solve_dual(prob).psi.min() >= -1e-12 * max(np.abs(F).max(), 1e-300)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.25, 4.0), st.floats(1e-3, 10.0), st.integers(1, 8), st.integers(0, 10**6))
def test_p2_bound_random(m, tau, N, seed):
    g = build_grid(1, 20)
    prob = DualProblem.constant(g, m, tau, _forcing(g, N, seed))
    assert regularity_ratio(solve_dual(prob), prob, 2) <= 1 / m + 1e-9


def test_adjoint_matches_transpose():
    g = build_grid(1, 5)
    rng = np.random.default_rng(3)
    dmap = DualMap(g, rng.uniform(1, 2, (3, 5)), 0.3)
    T = dmap.dense()
    Z = rng.standard_normal((3, 5))
    np.testing.assert_allclose(dmap.adjoint(Z).ravel(), T.T @ Z.ravel(), rtol=1e-11, atol=1e-12)


def test_duality_identity_telescopes():
    g = build_grid(1, 30)
    rng = np.random.default_rng(4)
    for N in (1, 5, 20):
        coef = rng.uniform(1, 2, (N, 30))
        F = rng.standard_normal((N, 30))
        s, b = duality_identity(g, coef, 0.05, rng.uniform(0, 1, 30), F)
        assert abs(s + b) <= 1e-11 * (abs(s) + abs(b) + 1)


def test_bar_D_examples():
    assert bar_D(1.3, 1.3, 2, 0.7) == 0.7
    assert bar_D(1, 2, 2, 2 / 3) == pytest.approx(1.0, rel=1e-15)
    assert bar_D(1, 3, 2, 0.5) == pytest.approx(1.0, rel=1e-15)
    with pytest.raises(AdmissibilityError):
        bar_D(1, 5, 2, 0.5)


def test_estimate_eigenmode_and_bounds():
    g = build_grid(1, 128)
    est = estimate_K(g, 1.0, 2.0, 1.0, 1)
    assert est.info["lambda_max_tau"] >= 1e3
    assert 0.999 <= est.K_hat <= 1 + 1e-9
    est2 = estimate_K(build_grid(1, 64), 2.0, 2.0, 0.1, 8, method="random", trials=200, seed=1)
    assert est2.K_hat <= 0.5 + 1e-9
    d = est2.to_dict()
    assert {"p", "m_or_bounds", "K_hat", "method", "trials", "tau", "N", "grid"} <= set(d)


def test_random_estimate_is_deterministic_across_jobs():
    g = build_grid(1, 32)
    a = estimate_K(g, 1.0, 2.5, 0.1, 4, method="random", trials=300, seed=9, n_jobs=1)
    b = estimate_K(g, 1.0, 2.5, 0.1, 4, method="random", trials=300, seed=9, n_jobs=4)
    assert a.ratios == b.ratios


@pytest.mark.parametrize("kw", [dict(method="bogus"), dict(p=1.0), dict(m=0.0), dict(N=0)])
def test_estimate_rejects(kw):
    args = dict(grid=build_grid(1, 8), m=1.0, p=2.0, tau=0.1, N=2)
    args.update(kw)
    with pytest.raises(InvalidParameterError):
        estimate_K(**args)


def test_dense_oracle_size_cap():
    with pytest.raises(InvalidParameterError):
        estimate_K(build_grid(1, 100), 1.0, 2.0, 0.1, 50, method="dense_oracle")


def test_dense_oracle_p2_is_spectral_norm():
    g = build_grid(1, 8)
    est = estimate_K(g, 1.5, 2.0, 0.2, 3, method="dense_oracle")
    T = DualMap(g, np.full((3, 8), 1.5), 0.2).dense()
    assert est.certified
    assert est.K_hat == pytest.approx(np.linalg.norm(T, 2), rel=1e-12)


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_power_against_dense(p):
    g = build_grid(1, 6)
    dmap = DualMap(g, np.full((3, 6), 1.0), 1.0)
    T = dmap.dense()
    value, upper = dense_pnorm(T, p)
    power = estimate_K(g, 1.0, p, 1.0, 3, method="power").K_hat
    assert power == pytest.approx(value, rel=1e-6)
    assert value <= upper * (1 + 1e-12)
    assert upper == pytest.approx(riesz_thorin_bound(T, p))


def test_boyd_power_on_diagonal():
    D = np.diag([3.0, 1.0, 0.5])
    best, _ = boyd_power(lambda x: D @ x, lambda y: D.T @ y, np.ones((3, 2)), 3.0)
    assert best.max() == pytest.approx(3.0, rel=1e-8)


def test_scaling_identity():
    g = build_grid(1, 32)
    F = _forcing(g, 6, 5)
    for m in (0.5, 2.0, 4.0):
        pm = DualProblem.constant(g, m, 0.02, F)
        p1 = DualProblem.constant(g, 1.0, m * 0.02, F)
        r_m = regularity_ratio(solve_dual(pm), pm, 2.7)
        r_1 = regularity_ratio(solve_dual(p1), p1, 2.7)
        assert abs(r_m - r_1 / m) <= 1e-12 * r_m


def test_horizon_independence():
    g = build_grid(1, 64)
    k16 = estimate_K(g, 1.0, 2.0, 1 / 16, 16).K_hat
    k256 = estimate_K(g, 1.0, 2.0, 1 / 16, 256).K_hat
    assert k16 <= k256 * (1 + 1e-12) <= 1 + 1e-9
    assert (k256 - k16) / k16 < 0.01


def test_perturbation_constant_coefficients():
    g = build_grid(1, 32)
    prob = DualProblem.constant(g, 1.5, 0.05, _forcing(g, 10, 6))
    rep = verify_perturbation(prob, 2, 1 / 1.5)
    assert rep["imp_laplace"].params["bar_D"] == pytest.approx(1 / 1.5)
    assert rep.passed and rep.info["psi_tail_all_pass"]
    zero = DualProblem.constant(g, 1.5, 0.05, np.zeros((3, 32)))
    rep = verify_perturbation(zero, 2, 1 / 1.5)
    assert all(r.lhs == 0 and r.passed for r in rep.records)


def test_perturbation_uncertified_off_two():
    g = build_grid(1, 16)
    rng = np.random.default_rng(7)
    prob = DualProblem(g, 0.1, rng.uniform(1, 2, (4, 16)), rng.standard_normal((4, 16)), 1.0, 2.0)
    rep = verify_perturbation(prob, 3.0, 0.7, K_method="power")
    assert not any(r.certified for r in rep.records)
    with pytest.raises(AdmissibilityError):
        verify_perturbation(prob, 2.0, 2.5)


def test_interpolation_degenerate_and_rejects():
    g = build_grid(1, 5)
    rep = verify_interpolation(g, 1.0, 1.0, 2, 2.0, 2.0, 2.0)
    assert rep.passed
    assert rep["interpolation"].lhs <= rep["interpolation"].rhs
    with pytest.raises(InvalidParameterError):
        verify_interpolation(g, 1.0, 1.0, 2, 3.0, 2.0, 2.5)
