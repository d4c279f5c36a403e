"""Oracle infrastructure: the enumeration projection, brute-force prox
comparisons, FD hypergradients on the toy, and the three-point
monotonicity property."""

import numpy as np

from bilevel_tracking.experiments import build_quadratic_problem
from bilevel_tracking.prox import (
    DeblurOuterRegParams,
    MriOuterRegParams,
    prox_deblur_outer,
    prox_mri_outer,
)
from bilevel_tracking.verification import (
    OracleReport,
    brute_prox_oracle,
    fd_hypergradient,
    project_box_halfspace,
    projected_gradient_minimize,
    three_point_monotonicity_check,
)

rng = np.random.default_rng(41)


def test_oracle_report_pass_rule():
    assert OracleReport("x", 1e-7, 10, 1e-6).passed
    assert not OracleReport("x", 1e-5, 10, 1e-6).passed


def test_project_box_halfspace_against_random_search():
    w = np.array([0.5, 0.3, 0.2])
    M = 0.4
    for _ in range(50):
        v = rng.standard_normal(3)
        p = project_box_halfspace(v, w, M)
        assert np.all(p >= -1e-12) and w @ p <= M + 1e-9
        d_best = np.sum((p - v) ** 2)
        # no feasible random point does better
        cand = rng.uniform(0, 1.5, size=(2000, 3))
        cand = cand[cand @ w <= M]
        assert np.all(np.sum((cand - v) ** 2, axis=1) >= d_best - 1e-9)


def test_projected_gradient_identity_when_unconstrained():
    v = rng.standard_normal(4)
    out = projected_gradient_minimize(v, lambda z: np.zeros_like(z), lambda z: z, 0.0, iters=10)
    np.testing.assert_allclose(out, v, atol=1e-14)


def test_brute_prox_oracle_identity_prox():
    report = brute_prox_oracle(
        prox_callback=lambda v: v,
        grad_smooth=lambda z: np.zeros_like(z),
        project=lambda z: z,
        lipschitz=0.0,
        dim=3,
        trials=20,
        name="identity",
    )
    assert report.passed and report.max_rel_error < 1e-12


def test_brute_prox_oracle_flags_wrong_prox():
    report = brute_prox_oracle(
        prox_callback=lambda v: 0.9 * v,
        grad_smooth=lambda z: np.zeros_like(z),
        project=lambda z: z,
        lipschitz=0.0,
        dim=3,
        trials=5,
        name="broken",
    )
    assert not report.passed


def test_mri_outer_prox_against_brute_force():
    w = np.array([0.45, 0.35, 0.2])
    p = MriOuterRegParams(w=w, M=0.2, beta=5.0)
    tau = 0.1

    report = brute_prox_oracle(
        prox_callback=lambda v: prox_mri_outer(v, tau, p),
        grad_smooth=lambda z: tau * p.beta * w,
        project=lambda z: project_box_halfspace(z, w, p.M),
        lipschitz=0.0,
        dim=3,
        trials=200,
        seed=1,
        name="prox_mri_outer",
    )
    assert report.passed, report


def test_deblur_outer_prox_against_brute_force():
    p = DeblurOuterRegParams(beta=30.0)
    sigma = 0.07

    def grad_smooth(z):
        g = np.zeros_like(z)
        g[1:] = 2 * sigma * p.beta * (z[1:].sum() - 1.0)
        return g

    def project(z):
        out = z.copy()
        out[0] = max(0.0, out[0])
        return out

    report = brute_prox_oracle(
        prox_callback=lambda v: prox_deblur_outer(v, sigma, p),
        grad_smooth=grad_smooth,
        project=project,
        lipschitz=6 * sigma * p.beta,
        dim=4,
        trials=200,
        seed=2,
        tolerance=1e-8,
        name="prox_deblur_outer",
    )
    assert report.passed, report


def test_fd_hypergradient_on_toy():
    toy = build_quadratic_problem(dim=5, n_alpha=2, seed=3)
    alpha = np.array([0.2, -0.4])
    grad, ok = fd_hypergradient(toy, alpha, h=1e-5)
    assert ok
    np.testing.assert_allclose(grad, toy.B.T @ (toy.B @ alpha - toy.z), atol=1e-8)
    at_star, _ = fd_hypergradient(toy, toy.alpha_star, h=1e-5)
    assert np.linalg.norm(at_star) < 1e-6


def test_three_point_monotonicity_zero_violations():
    report = three_point_monotonicity_check(trials=2000, seed=7)
    assert report.passed, report


def test_three_point_monotonicity_degenerate_cases():
    # z = x reduces to strong monotonicity; H = gamma*I with small t
    r = np.random.default_rng(8)
    for _ in range(200):
        n = 4
        gamma = 0.7
        H = gamma * np.eye(n)
        x = r.standard_normal(n)
        xhat = r.standard_normal(n)
        t = 1e-3
        lhs = float((H @ (x - xhat)) @ (x - xhat))
        rhs = (gamma - t * gamma) * np.sum((x - xhat) ** 2) - gamma / (4 * t) * 0.0
        assert lhs >= rhs - 1e-12


def test_tracking_monitor_contracts_at_fixed_alpha():
    """With sigma = 0 the inner tracking ratio is a pure contraction factor."""
    from bilevel_tracking.driver import BataState, RunConfig, bata_iteration, implicit_solve
    from bilevel_tracking.experiments import MriExperimentConfig, build_mri_problem
    from bilevel_tracking.verification import tracking_monitor

    cfg = MriExperimentConfig(n1=8, n2=8, n_groups=4, n_examples=1, seed=2, theta_y=0.01)
    prob = build_mri_problem(cfg)
    alpha = np.full(4, 0.15)
    u0, p0, _ = implicit_solve(prob, alpha, inner_steps=2000, adjoint_mode="direct")
    # perturb so the monitor sees genuine errors
    u0 = [type(u0[0])(
        type(u0[0].x)(8, 8, u0[0].x.values + 0.05 * rng.standard_normal(64)),
        type(u0[0].y)(8, 8, u0[0].y.values + 0.01 * rng.standard_normal(128)),
    )]
    p0 = [type(p0[0])(p0[0].px + 0.1 * rng.standard_normal(p0[0].px.shape),
                      p0[0].py + 0.1 * rng.standard_normal(p0[0].py.shape))]
    state = BataState(u0, p0, alpha.copy())
    run_cfg = RunConfig(method="pdps-block-gs", iters=1)
    states = [([*state.u], [*state.p], state.alpha.copy(), state.alpha.copy())]
    for _ in range(6):
        state = bata_iteration(state, prob, run_cfg, sigma=0.0)
        states.append(([*state.u], [*state.p], state.alpha.copy(), state.alpha.copy()))
    metric = prob.metric(prob.inner[0].K)
    report = tracking_monitor(prob, states, metric, inner_steps=20000, inner_tol=1e-11)
    assert len(report) == 6
    for rec in report:
        assert rec["inner_ratio"] < 1.0
        assert np.isfinite(rec["adjoint_ratio"])


def test_oracle_report_csv_row():
    rep = OracleReport("probe", 2.5e-7, 50, 1e-6)
    row = rep.as_csv_row()
    assert row.split(",") == ["probe", "2.500e-07", "50", "1", "1.0e-06"]
