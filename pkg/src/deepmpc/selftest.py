"""Built-in oracle suites runnable from the CLI.

Each suite re-derives its expected values from an independent method
(brute-force evaluation, finite differences, projected gradient) and
checks the production path against it, printing one PASS/FAIL line per
suite.  Returns the number of failed suites.
"""

import numpy as np

from . import network as net_mod
from . import trainer as trainer_mod
from .ocp import QpProblem, solve_qp
from .oracles import projected_gradient_box, random_box_qp


def _suite_projection(quick):
    rng = np.random.default_rng(1)
    steps = 2000 if quick else 20000
    bounds = np.array([0.4, 0.9])
    ow = net_mod.OutputWeights.zeros(5, bounds, 0.5)
    worst = -np.inf
    for _ in range(steps):
        phi = np.concatenate(([1.0], rng.normal(size=4)))
        innovation = rng.normal(size=2)
        k_bar = ow.k_matrix + (0.5 / (phi @ phi)) * np.outer(phi, innovation)
        ow = net_mod.OutputWeights(net_mod.project_columns(k_bar, bounds),
                                   bounds, 0.5)
        worst = max(worst, float(np.max(np.linalg.norm(ow.k_matrix, axis=0) - bounds)))
    return worst <= 1e-12, f"worst column-bound excess {worst:.2e}"


def _suite_update_identity(quick):
    rng = np.random.default_rng(2)
    steps = 500 if quick else 2000
    worst = 0.0
    for _ in range(steps):
        g = rng.normal(size=(3, 2)) + 2 * np.eye(3, 2)
        phi = np.concatenate(([1.0], rng.normal(size=3)))
        k = rng.normal(size=(4, 2)) * 0.1
        u_tilde = rng.normal(size=2)
        x_nom = rng.normal(size=3)
        x_next = x_nom + g @ u_tilde
        ow = net_mod.OutputWeights(net_mod.project_columns(k, np.array([5.0, 5.0])),
                                   np.array([5.0, 5.0]), 0.5)
        updated = net_mod.update_output_weights(ow, phi, x_next, x_nom, g)
        expected = ow.k_matrix + (0.5 / (phi @ phi)) * np.outer(phi, u_tilde)
        worst = max(worst, float(np.max(np.abs(updated.k_matrix - expected))))
    return worst <= 1e-10, f"max update mismatch {worst:.2e}"


def _suite_qp(quick):
    rng = np.random.default_rng(3)
    count = 20 if quick else 50
    worst_gap, worst_kkt = 0.0, 0.0
    for _ in range(count):
        problem = random_box_qp(rng, n_max=30)
        sol = solve_qp(problem)
        z_ref = projected_gradient_box(problem, max_iter=10**6, tol=1e-12)
        ref_obj = problem.objective(z_ref)
        gap = abs(sol.value - ref_obj) / (1.0 + abs(ref_obj))
        worst_gap = max(worst_gap, gap)
        worst_kkt = max(worst_kkt, sol.kkt_residual)
    ok = worst_gap <= 1e-6 and worst_kkt <= 1e-8
    return ok, f"worst objective gap {worst_gap:.2e}, worst KKT {worst_kkt:.2e}"


def _suite_gradient(quick):
    rng = np.random.default_rng(4)
    count = 5 if quick else 10
    worst = 0.0
    for _ in range(count):
        net = net_mod.init_feature_network([2, 4, 3], ["relu", "tanh"], rng)
        xs = rng.normal(size=(6, 2))
        labels = rng.normal(size=(6, 1)) * 0.3
        k = rng.normal(size=(4, 1)) * 0.3
        grads = trainer_mod.dataset_gradient(xs, labels, net, k)
        eps = 1e-5
        for li, w in enumerate(net.weights):
            for idx in np.ndindex(w.shape):
                w_plus = [m.copy() for m in net.weights]
                w_plus[li][idx] += eps
                w_minus = [m.copy() for m in net.weights]
                w_minus[li][idx] -= eps
                lp = trainer_mod.dataset_loss(xs, labels, net.with_weights(w_plus), k)
                lm = trainer_mod.dataset_loss(xs, labels, net.with_weights(w_minus), k)
                fd = (lp - lm) / (2 * eps)
                denom = max(1e-8, abs(fd), abs(grads[li][idx]))
                worst = max(worst, abs(grads[li][idx] - fd) / denom)
    return worst <= 1e-4, f"worst gradient relative error {worst:.2e}"


def _suite_basis():
    from .plant import eval_basis
    got = eval_basis(np.array([0.0, 0.0]), 0.1523 / 5)
    expected = np.array([0.03046, 0, 0, 0, 0, 0])
    ok = np.allclose(got, expected, atol=1e-12)
    return ok, f"basis at origin = {got[0]:.5f}"


SUITES = [
    ("projection_invariant", _suite_projection, True),
    ("update_law_identity", _suite_update_identity, True),
    ("qp_vs_projected_gradient", _suite_qp, True),
    ("gradient_vs_finite_diff", _suite_gradient, True),
    ("benchmark_basis", _suite_basis, False),
]


def run(quick=False):
    failures = 0
    for name, fn, takes_quick in SUITES:
        ok, info = fn(quick) if takes_quick else fn()
        state = "PASS" if ok else "FAIL"
        print(f"{name:<28s} {state}  ({info})")
        failures += 0 if ok else 1
    print(f"{len(SUITES) - failures}/{len(SUITES)} suites passed")
    return failures
