"""Independent reference solvers used to cross-check the QP path.

These deliberately share nothing with the operator-splitting solver:
box problems are solved by plain projected gradient descent, general
problems by accelerated projected gradient on the dual.  Both are slow
and simple on purpose.
"""

import numpy as np

from .ocp import QpProblem


def random_box_qp(rng, n_max=60):
    """Strictly convex QP with box constraints on the variables."""
    n = int(rng.integers(2, n_max + 1))
    m_factor = rng.normal(size=(n, n))
    p = m_factor @ m_factor.T + (0.5 + rng.uniform()) * np.eye(n)
    q = rng.normal(size=n) * 2.0
    center = rng.normal(size=n)
    half = rng.uniform(0.1, 2.0, size=n)
    return QpProblem(p, q, np.eye(n), center - half, center + half)


def random_general_qp(rng, n_max=60, k_max=120):
    """Strictly convex QP with general two-sided inequality rows.

    Bounds are placed around a random interior point, so the problem is
    always feasible; a fraction of rows are collapsed to equalities.
    """
    n = int(rng.integers(2, n_max + 1))
    k = int(rng.integers(1, k_max + 1))
    m_factor = rng.normal(size=(n, n))
    p = m_factor @ m_factor.T + (0.5 + rng.uniform()) * np.eye(n)
    q = rng.normal(size=n) * 2.0
    a = rng.normal(size=(k, n))
    z_feasible = rng.normal(size=n)
    az = a @ z_feasible
    lower = az - rng.uniform(0.05, 1.5, size=k)
    upper = az + rng.uniform(0.05, 1.5, size=k)
    n_eq = int(rng.integers(0, max(1, k // 8) + 1))
    if n_eq:
        eq_rows = rng.choice(k, size=n_eq, replace=False)
        lower[eq_rows] = az[eq_rows]
        upper[eq_rows] = az[eq_rows]
    return QpProblem(p, q, a, lower, upper)


def projected_gradient_box(problem, max_iter=10**6, tol=1e-12):
    """Plain projected gradient on a box-constrained QP.

    Requires the constraint matrix to be the identity.  Runs with the
    optimal constant step 1/L until the fixed-point residual drops below
    ``tol`` (or the iteration budget is spent).
    """
    if problem.k != problem.n or not np.allclose(problem.a_matrix,
                                                 np.eye(problem.n)):
        raise ValueError("box oracle needs identity constraint rows")
    lip = float(np.linalg.eigvalsh(problem.p_matrix).max())
    step = 1.0 / lip
    z = np.clip(np.zeros(problem.n), problem.lower, problem.upper)
    for _ in range(max_iter):
        grad = problem.p_matrix @ z + problem.q_vector
        z_new = np.clip(z - step * grad, problem.lower, problem.upper)
        if np.max(np.abs(z_new - z)) <= tol:
            return z_new
        z = z_new
    return z


def dual_projected_gradient(problem, max_iter=200000, tol=1e-11):
    """Accelerated projected gradient on the (split) dual of a convex QP.

    With multipliers ``lam_plus, lam_minus >= 0`` for the upper/lower
    rows, the dual gradient needs only a clip onto the nonnegative
    orthant, so general constraint rows cost nothing extra.  Nesterov
    momentum with function-value restarts keeps it practical; iteration
    stops when the projected-gradient fixed-point residual vanishes.

    Returns (z, dual_objective); at the optimum the dual objective equals
    the primal optimum and z is the primal minimizer.
    """
    p_inv = np.linalg.inv(problem.p_matrix)
    stacked = np.vstack([problem.a_matrix, -problem.a_matrix])
    offsets = np.concatenate([problem.upper, -problem.lower])
    m_big = stacked @ p_inv @ stacked.T
    lip = float(np.linalg.eigvalsh(m_big).max())
    step = 1.0 / max(lip, 1e-12)
    sq = stacked @ p_inv @ problem.q_vector

    def neg_grad(lam):
        return m_big @ lam + sq + offsets

    def dual_value(lam):
        v = problem.q_vector + stacked.T @ lam
        return float(-0.5 * v @ p_inv @ v - offsets @ lam + problem.constant)

    lam = np.zeros(2 * problem.k)
    momentum = lam.copy()
    t_acc = 1.0
    prev_val = dual_value(lam)
    for it in range(1, max_iter + 1):
        lam_new = np.maximum(momentum - step * neg_grad(momentum), 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc**2))
        beta = (t_acc - 1.0) / t_new
        momentum = lam_new + beta * (lam_new - lam)
        lam, t_acc = lam_new, t_new
        if it % 50 == 0:
            val = dual_value(lam)
            if val < prev_val:                    # restart on non-monotone value
                momentum = lam.copy()
                t_acc = 1.0
            prev_val = val
            residual = np.max(np.abs(
                lam - np.maximum(lam - step * neg_grad(lam), 0.0)), initial=0.0)
            if residual <= tol * (1.0 + np.max(np.abs(lam), initial=0.0)):
                break
    z = -p_inv @ (problem.q_vector + stacked.T @ lam)
    return z, dual_value(lam)
