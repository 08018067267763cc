"""Implicit differentiation of a solved QP with respect to its data.

At an optimum the KKT map

    g(z, lam, nu) = [Pz + q + G'lam + A'nu,  lam * (Gz - h),  Az - b]

vanishes, and its Jacobian in ``(z, lam, nu)`` is the matrix the
interior-point method factored (with the solver slack in place of
``h - Gz``). For a loss with gradient ``g_z`` on ``z`` the adjoint
``y = J^{-T} [g_z, 0, 0]`` gives every coefficient gradient as a rank-one
expression in ``y`` and the primal-dual point, so the backward pass is one
transposed back-substitution against the stored LU, followed by two steps of
iterative refinement against the unshifted Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qp_core import QpError, QpProblem, QpSolution, SolverConfig, kkt_jacobian, solve

REFINEMENT_STEPS = 2


class StaleFactorization(QpError):
    pass


class SingularSystem(QpError):
    pass


@dataclass(frozen=True)
class QpGradients:
    dP: np.ndarray
    dq: np.ndarray
    dG: np.ndarray
    dh: np.ndarray
    dA: np.ndarray
    db: np.ndarray

    def as_tuple(self):
        return self.dP, self.dq, self.dG, self.dh, self.dA, self.db

    def dot(self, other: "QpGradients") -> float:
        return float(sum(np.sum(a * b) for a, b in zip(self.as_tuple(), other.as_tuple())))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))


def backward(problem: QpProblem, solution: QpSolution, dL_dz) -> QpGradients:
    """Gradients of ``L(z*)`` with respect to ``(P, q, G, h, A, b)``."""
    fac = solution.kkt_factor
    if fac is None:
        raise StaleFactorization("solution carries no KKT factorization")
    m, p, r = problem.m, problem.p, problem.r
    if (fac.m, fac.p, fac.r) != (m, p, r):
        raise StaleFactorization("factorization does not match the problem dimensions")
    g = np.asarray(dL_dz, dtype=float).reshape(-1)
    if g.shape[0] != m:
        raise ValueError(f"dL_dz has length {g.shape[0]}, expected {m}")

    n = m + p + r if fac.full else m + r
    rhs = np.zeros(n)
    rhs[:m] = g
    y = fac.solve(rhs, transposed=True)
    if fac.regularization > 0:
        # the stored LU carries a small diagonal shift; refine against the exact Jacobian
        K = kkt_jacobian(problem, solution)
        for _ in range(REFINEMENT_STEPS):
            y = y + fac.solve(rhs - K.T @ y, transposed=True)
    if not np.all(np.isfinite(y)):
        raise SingularSystem("adjoint KKT solve produced non-finite values")
    y_z = y[:m]
    z, lam, nu = solution.z_star, solution.lambda_star, solution.nu_star
    if fac.full:
        y_in = lam * y[m:m + p]
        y_eq = y[m + p:]
    else:
        y_in = np.zeros(0)
        y_eq = y[m:]

    dP = -np.outer(y_z, z)
    return QpGradients(
        dP=0.5 * (dP + dP.T),
        dq=-y_z,
        dG=-(np.outer(lam, y_z) + np.outer(y_in, z)),
        dh=y_in,
        dA=-(np.outer(nu, y_z) + np.outer(y_eq, z)),
        db=y_eq,
    )


def perturbed(problem: QpProblem, direction: QpGradients, step: float) -> QpProblem:
    """``problem`` with its data moved by ``step * direction``."""
    return QpProblem(
        problem.P + step * direction.dP,
        problem.q + step * direction.dq,
        problem.G + step * direction.dG,
        problem.h + step * direction.dh,
        problem.A + step * direction.dA,
        problem.b + step * direction.db,
    )


def directional_derivative(problem: QpProblem, solution: QpSolution,
                           direction: QpGradients) -> np.ndarray:
    """``dz*/d(data)`` applied to ``direction``, assembled from ``m`` adjoint solves."""
    m = problem.m
    out = np.empty(m)
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        out[i] = backward(problem, solution, e).dot(direction)
    return out


def jacobian_vector_check(problem: QpProblem, direction: QpGradients, step: float = 1e-6,
                          config: SolverConfig = SolverConfig(tolerance=1e-12,
                                                              max_iterations=100)) -> float:
    """Relative error between the implicit and the central-difference JVP."""
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    sym = 0.5 * (direction.dP + direction.dP.T)
    direction = QpGradients(sym, *direction.as_tuple()[1:])
    sol = solve(problem, config)
    implicit = directional_derivative(problem, sol, direction)
    z_plus = solve(perturbed(problem, direction, step), config).z_star
    z_minus = solve(perturbed(problem, direction, -step), config).z_star
    fd = (z_plus - z_minus) / (2.0 * step)
    return float(np.linalg.norm(fd - implicit) / (np.linalg.norm(implicit) + 1e-12))
