"""Compare one-step splitting schemes on random linear systems and on a real
adjoint system: estimated contraction factors and measured error decay.

Run:

    python3 demos/splitting_contraction_demo.py
"""

import numpy as np

from bilevel_tracking.adjoint import (
    BlockGaussSeidel,
    GaussSeidelSplitting,
    IdentitySplitting,
    JacobiSplitting,
    NoSplitting,
    adjoint_residual,
    check_split_condition,
    dense_splitting_step,
    splitting_step,
)
from bilevel_tracking.driver import implicit_solve
from bilevel_tracking.experiments import DeblurExperimentConfig, build_deblur_problem


def random_spd(n, gamma, big_l, seed=0):
    r = np.random.default_rng(seed)
    eig = np.concatenate(([gamma, big_l], r.uniform(gamma, big_l, n - 2)))
    Q, _ = np.linalg.qr(r.standard_normal((n, n)))
    return (Q * eig) @ Q.T


def dense_schemes():
    print("=== dense 40x40 SPD system ===")
    A = random_spd(40, 0.4, 3.0, seed=1)
    rng = np.random.default_rng(2)
    b = rng.standard_normal((1, 40))
    sol = np.linalg.solve(A, b.T).T
    theta = 0.8 * 2 * 0.4 / 3.0**2
    for name, scheme in [("jacobi", JacobiSplitting()),
                         ("gauss-seidel", GaussSeidelSplitting()),
                         (f"identity(theta={theta:.3f})", IdentitySplitting(theta)),
                         ("none (direct)", NoSplitting())]:
        rep = check_split_condition(A, scheme)
        p = rng.standard_normal((1, 40))
        for _ in range(25):
            p = dense_splitting_step(p, A, b, scheme)
        err = np.linalg.norm(p - sol) / np.linalg.norm(sol)
        print(f"  {name:24s} zeta_est={rep.zeta_est:.4f} ({rep.norm} norm), "
              f"error after 25 steps: {err:.2e}")


def adjoint_system():
    print("=== deconvolution adjoint system (16x16) ===")
    cfg = DeblurExperimentConfig(n1=16, n2=16, rotation_deg=0.0)
    prob = build_deblur_problem(cfg)
    alpha = prob.alpha_init
    u, p_exact, _ = implicit_solve(prob, alpha, inner_steps=8000, adjoint_mode="direct")
    sys0 = prob.build_adjoint_system(u[0], alpha, 0)
    for name, scheme in [
        ("block Gauss-Seidel", BlockGaussSeidel(prob.theta_x_inv, prob.defaults.theta_y)),
        ("identity", IdentitySplitting(prob.defaults.theta_x_identity,
                                       prob.defaults.theta_y_identity)),
    ]:
        from bilevel_tracking.adjoint import AdjointMatrix

        p = AdjointMatrix.zeros(prob.n_alpha, 16, 16)
        res0 = adjoint_residual(p, sys0)
        for _ in range(300):
            p = splitting_step(p, sys0, scheme)
        print(f"  {name:20s} residual after 300 steps: "
              f"{adjoint_residual(p, sys0) / res0:.2e} of the initial")


if __name__ == "__main__":
    dense_schemes()
    adjoint_system()
