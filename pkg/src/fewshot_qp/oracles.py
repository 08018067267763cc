"""Independent reference solvers and random problem generators.

Nothing here calls the interior-point code; these routines exist so the
solver, its gradients and the base learners can be checked against
something computed another way.
"""
from __future__ import annotations

import itertools

import numpy as np

from .qp_core import QpProblem


def active_set_enumeration(problem: QpProblem, tol: float = 1e-9):
    """Exact QP solution by trying every active set.

    Each candidate set is solved as an equality-constrained KKT system; the
    first primal- and dual-feasible one is returned as ``(z, lam, nu)``.
    Exponential in ``p`` and meant for ``p <= 12``.
    """
    m, p, r = problem.m, problem.p, problem.r
    P, q, G, h, A, b = problem.P, problem.q, problem.G, problem.h, problem.A, problem.b
    scale = 1.0 + np.max(np.abs(h), initial=0.0)
    for size in range(0, min(p, m - r) + 1):
        for active in itertools.combinations(range(p), size):
            idx = list(active)
            Ga = G[idx]
            n = m + size + r
            K = np.zeros((n, n))
            K[:m, :m] = P
            K[:m, m:m + size] = Ga.T
            K[:m, m + size:] = A.T
            K[m:m + size, :m] = Ga
            K[m + size:, :m] = A
            rhs = np.concatenate([-q, h[idx], b])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z = sol[:m]
            lam_a = sol[m:m + size]
            if np.any(lam_a < -tol * scale):
                continue
            if np.any(G @ z - h > tol * scale):
                continue
            lam = np.zeros(p)
            lam[idx] = lam_a
            return z, lam, sol[m + size:]
    raise RuntimeError("no feasible active set found")


def random_qp(rng: np.random.Generator, m: int, p: int, r: int, shift: float = 0.1) -> QpProblem:
    """Random strictly convex, feasible QP with ``P = M'M + shift I``."""
    M = rng.standard_normal((m, m))
    P = M.T @ M + shift * np.eye(m)
    q = rng.standard_normal(m)
    G = rng.standard_normal((p, m))
    A = rng.standard_normal((r, m))
    z0 = rng.standard_normal(m)
    h = G @ z0 + rng.uniform(0.1, 1.0, p)
    b = A @ z0
    return QpProblem(P, q, G, h, A, b)


def random_complementary_qp(rng, m: int, p: int, r: int, active_fraction: float = 0.5,
                            margin: float = 0.5):
    """Strictly convex QP with a planted, strictly complementary optimum.

    The optimum is chosen first, then ``q``, ``h`` and ``b`` are set so the
    KKT conditions hold with every active multiplier and every inactive
    slack at least ``margin``. Returns ``(problem, z, lam, nu)``.
    """
    M = rng.standard_normal((m, m))
    P = M.T @ M / m + 0.5 * np.eye(m)
    G = rng.standard_normal((p, m))
    A = rng.standard_normal((r, m))
    z = rng.standard_normal(m)
    n_active = min(int(round(active_fraction * p)), max(m - r, 0))
    active = np.zeros(p, dtype=bool)
    active[rng.permutation(p)[:n_active]] = True
    lam = np.where(active, rng.uniform(margin, margin + 1.0, p), 0.0)
    slack = np.where(active, 0.0, rng.uniform(margin, margin + 1.0, p))
    nu = rng.standard_normal(r)
    h = G @ z + slack
    b = A @ z
    q = -(P @ z + G.T @ lam + A.T @ nu)
    return QpProblem(P, q, G, h, A, b), z, lam, nu


def _project_capped_simplex(V: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto ``{a : a <= ub, sum(a) = 0}``.

    The projection is ``a = min(v - tau, ub)`` with ``tau`` the root of the
    piecewise-linear, nonincreasing map ``tau -> sum(min(v - tau, ub))``;
    the root is located exactly among the sorted breakpoints ``v - ub``.
    """
    n, K = V.shape
    bp = np.sort(V - ub, axis=1)

    def phi(tau):
        return np.minimum(V - tau[:, None], ub).sum(axis=1)

    vals = np.stack([phi(bp[:, j]) for j in range(K)], axis=1)  # nonincreasing in j
    # first breakpoint where phi <= 0; phi is linear between breakpoints
    rows = np.arange(n)
    j = np.argmax(vals <= 0, axis=1)
    has = vals[rows, j] <= 0
    lo = np.maximum(j - 1, 0)
    t_lo, t_hi = bp[rows, lo], bp[rows, j]
    f_lo, f_hi = vals[rows, lo], vals[rows, j]
    denom = f_lo - f_hi
    safe = np.where(denom > 0, denom, 1.0)
    interp = np.where(denom > 0, t_lo + (t_hi - t_lo) * f_lo / safe, t_lo)
    # beyond the last breakpoint every coordinate is free: phi = sum(v) - K tau
    beyond = bp[:, -1] + vals[:, -1] / K
    tau = np.where(has, np.where(j == 0, t_hi, interp), beyond)
    return np.minimum(V - tau[:, None], ub)


def cs_svm_dual_objective(alpha: np.ndarray, gram: np.ndarray, labels: np.ndarray) -> float:
    """Minimization form of the Crammer-Singer dual: 1/2 sum_k a_k'Ga_k - sum_n a_n^{y_n}."""
    n = alpha.shape[0]
    return float(0.5 * np.sum(alpha * (gram @ alpha)) - alpha[np.arange(n), labels].sum())


def cs_svm_projected_gradient(gram: np.ndarray, labels: np.ndarray, num_classes: int, c: float,
                              max_iterations: int = 200_000, tol: float = 1e-10):
    """Accelerated projected gradient on the Crammer-Singer dual.

    Returns the ``(n, K)`` dual matrix. Stops once the gradient mapping
    ``L (x - proj(x - grad/L))`` falls below ``tol`` in max-norm, which
    bounds the objective gap by ``tol`` times the feasible-set diameter,
    or once even an unaccelerated step fails to decrease the objective.
    """
    n = gram.shape[0]
    labels = np.asarray(labels)
    Y = np.zeros((n, num_classes))
    Y[np.arange(n), labels] = 1.0
    ub = c * Y
    L = max(np.linalg.eigvalsh(gram)[-1], 1e-12)
    x = _project_capped_simplex(np.zeros((n, num_classes)), ub)
    yk, t = x.copy(), 1.0
    f_prev = cs_svm_dual_objective(x, gram, labels)
    for it in range(max_iterations):
        x_new = _project_capped_simplex(yk - (gram @ yk - Y) / L, ub)
        f_new = cs_svm_dual_objective(x_new, gram, labels)
        if f_new > f_prev:
            if t == 1.0:
                # a plain projected-gradient step no longer descends: roundoff floor
                break
            # adaptive restart keeps the momentum monotone
            yk, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        yk = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t, f_prev = x_new, t_new, f_new
        if it % 10 == 0:
            mapped = _project_capped_simplex(x - (gram @ x - Y) / L, ub)
            if L * np.max(np.abs(x - mapped)) < tol:
                break
    return x
