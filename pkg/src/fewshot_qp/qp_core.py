"""Dense primal-dual interior-point solver for convex QPs.

Problems are in the standard form

    minimize    1/2 z^T P z + q^T z
    subject to  G z <= h
                A z  = b

and are solved with a Mehrotra predictor-corrector method. The slack step
is eliminated in closed form, so each iteration factors one dense matrix:
the Jacobian of the KKT map in ``(z, lam, nu)``. Its LU factorization at
the returned point is kept on the solution so the backward pass in
:mod:`fewshot_qp.qp_grad` needs only a single back-substitution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla


class QpError(Exception):
    """Base class for solver failures."""


class DimensionMismatch(QpError, ValueError):
    pass


class SingularKkt(QpError):
    pass


class Infeasible(QpError):
    pass


def _as_matrix(x, rows: Optional[int], cols: int, name: str) -> np.ndarray:
    if x is None:
        return np.zeros((0 if rows is None else rows, cols))
    a = np.asarray(x, dtype=float)
    if a.size == 0:
        return np.zeros((0, cols))
    if a.ndim != 2 or a.shape[1] != cols:
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected (*, {cols})")
    return a


def _as_vector(x, n: int, name: str) -> np.ndarray:
    if x is None:
        return np.zeros(n)
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape[0] != n:
        raise DimensionMismatch(f"{name} has length {a.shape[0]}, expected {n}")
    return a


@dataclass(frozen=True)
class QpProblem:
    """Convex QP ``min 1/2 z'Pz + q'z  s.t. Gz <= h, Az = b``.

    ``G``/``h`` and ``A``/``b`` may be omitted (or given with zero rows).
    """

    P: np.ndarray
    q: np.ndarray
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DimensionMismatch(f"P must be square, got shape {P.shape}")
        m = P.shape[0]
        q = _as_vector(self.q, m, "q")
        G = _as_matrix(self.G, None, m, "G")
        h = _as_vector(self.h, G.shape[0], "h")
        A = _as_matrix(self.A, None, m, "A")
        b = _as_vector(self.b, A.shape[0], "b")
        for name, val in zip("PqGhAb", (P, q, G, h, A, b)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[0]

    @property
    def r(self) -> int:
        return self.A.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)

    def check(self, sym_tol: float = 1e-10, psd_tol: float = 1e-8) -> None:
        """Raise ``ValueError`` if P is not symmetric PSD within tolerance."""
        P = self.P
        scale = max(np.linalg.norm(P), 1.0)
        if np.max(np.abs(P - P.T), initial=0.0) > sym_tol * scale:
            raise ValueError("P is not symmetric")
        if self.m and np.linalg.eigvalsh(0.5 * (P + P.T))[0] < -psd_tol * scale:
            raise ValueError("P is not positive semidefinite")

    def dual_value(self, lam: np.ndarray, nu: np.ndarray) -> float:
        """Lagrangian dual function value; requires P positive definite."""
        # minimizer of the Lagrangian in z: P z = -(q + G'lam + A'nu)
        c = self.q + self.G.T @ lam + self.A.T @ nu
        z = np.linalg.solve(self.P, -c)
        return float(0.5 * z @ self.P @ z + c @ z - lam @ self.h - nu @ self.b)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    tolerance: float = 1e-8
    kkt_regularization: float = 1e-9
    step_fraction: float = 0.99

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class KktFactor:
    """LU factorization of the KKT Jacobian at a solver iterate.

    ``full`` systems order unknowns as ``(z, lam, nu)``; the
    inequality-free path (``p == 0``) orders them as ``(z, nu)``.
    """

    lu: np.ndarray
    piv: np.ndarray
    m: int
    p: int
    r: int
    full: bool
    regularization: float

    def solve(self, rhs: np.ndarray, transposed: bool = False) -> np.ndarray:
        return sla.lu_solve((self.lu, self.piv), rhs, trans=1 if transposed else 0,
                            check_finite=False)


@dataclass(frozen=True)
class QpSolution:
    z_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    slack: np.ndarray
    kkt_factor: Optional[KktFactor]
    iterations: int
    residual: float
    converged: bool = field(default=False)


def _full_kkt(problem: QpProblem, s, lam, reg: float) -> np.ndarray:
    # Jacobian of [Pz + q + G'lam + A'nu, lam * (Gz - h), Az - b] in (z, lam, nu),
    # with the slack s standing in for h - Gz
    m, p, r = problem.m, problem.p, problem.r
    n = m + p + r
    K = np.zeros((n, n))
    K[:m, :m] = problem.P
    K[:m, m:m + p] = problem.G.T
    K[:m, m + p:] = problem.A.T
    K[m:m + p, :m] = lam[:, None] * problem.G
    K[m + p:, :m] = problem.A
    d = np.arange(n)
    K[d[:m], d[:m]] += reg
    K[d[m:m + p], d[m:m + p]] = -s - reg
    K[d[m + p:], d[m + p:]] -= reg
    return K


def _eq_kkt(problem: QpProblem, reg: float) -> np.ndarray:
    m, r = problem.m, problem.r
    K = np.zeros((m + r, m + r))
    K[:m, :m] = problem.P + reg * np.eye(m)
    K[:m, m:] = problem.A.T
    K[m:, :m] = problem.A
    K[m:, m:] = -reg * np.eye(r)
    return K


def _factor(build, reg: float, m: int, p: int, r: int, full: bool) -> KktFactor:
    # escalate the diagonal shift until U has no (near-)zero pivots
    for attempt in range(4):
        lu, piv = sla.lu_factor(build(reg), check_finite=False)
        diag = np.abs(np.diag(lu))
        scale = max(np.max(diag, initial=0.0), 1.0)
        if np.all(np.isfinite(diag)) and np.min(diag, initial=np.inf) > 1e-14 * scale:
            return KktFactor(lu, piv, m, p, r, full, reg)
        reg = 1e-9 if reg == 0 else reg * 1e3
    raise SingularKkt(f"KKT matrix is singular even with regularization {reg:.1e}")


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def _equality_solve(problem: QpProblem, config: SolverConfig) -> QpSolution:
    m = problem.m
    # one Newton step is exact, so only shift the diagonal if the system is singular
    fac = _factor(lambda reg: _eq_kkt(problem, reg), 0.0, m, 0, problem.r, full=False)
    sol = fac.solve(np.concatenate([-problem.q, problem.b]))
    z, nu = sol[:m], sol[m:]
    res = np.linalg.norm(np.concatenate([
        problem.P @ z + problem.q + problem.A.T @ nu, problem.A @ z - problem.b]))
    return QpSolution(z, np.zeros(0), nu, np.zeros(0), fac, 1, float(res),
                      converged=bool(res <= config.tolerance))


def _initial_point(problem: QpProblem):
    # least-squares point: min 1/2 z'Pz + q'z + 1/2 ||Gz - h||^2  s.t. Az = b
    m, r = problem.m, problem.r
    G, h = problem.G, problem.h
    K = np.zeros((m + r, m + r))
    K[:m, :m] = problem.P + G.T @ G + 1e-9 * np.eye(m)
    K[:m, m:] = problem.A.T
    K[m:, :m] = problem.A
    K[m:, m:] = -1e-9 * np.eye(r)
    rhs = np.concatenate([-problem.q + G.T @ h, problem.b])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    z, nu = sol[:m], sol[m:]
    s = h - G @ z
    if np.min(s) < 1.0:
        s = s + (1.0 - np.min(s))
    lam = np.ones(problem.p)
    return z, s, lam, nu


def _residuals(problem: QpProblem, z, s, lam, nu):
    rd = problem.P @ z + problem.q + problem.G.T @ lam + problem.A.T @ nu
    rp = problem.G @ z + s - problem.h
    re = problem.A @ z - problem.b
    return rd, rp, re


def _farkas_certificate(problem: QpProblem, lam, nu) -> bool:
    # normalized (lam >= 0, nu) with G'lam + A'nu ~ 0 and h'lam + b'nu < 0 rules out
    # any feasible point of moderate norm
    y = np.concatenate([lam, nu])
    norm = np.linalg.norm(y)
    if norm < 1e6:
        return False
    lam, nu = lam / norm, nu / norm
    cert = np.linalg.norm(problem.G.T @ lam + problem.A.T @ nu)
    gap = problem.h @ lam + problem.b @ nu
    scale = 1.0 + np.linalg.norm(problem.G) + np.linalg.norm(problem.A)
    return bool(cert <= 1e-10 * scale and gap < -1e-6 * (1.0 + np.linalg.norm(problem.h)
                                                         + np.linalg.norm(problem.b)))


def _ipm(problem: QpProblem, config: SolverConfig, cap: int, initial=None) -> QpSolution:
    m, p, r = problem.m, problem.p, problem.r
    if initial is None:
        z, s, lam, nu = _initial_point(problem)
    else:
        z, s, lam, nu = (np.array(v, dtype=float) for v in initial)
        if np.any(s <= 0) or np.any(lam <= 0):
            raise ValueError("initial point must have strictly positive s and lam")
    iz, il, iv = slice(0, m), slice(m, m + p), slice(m + p, m + p + r)
    reg = config.kkt_regularization
    rp0 = None
    it = 0
    while True:
        rd, rp, re = _residuals(problem, z, s, lam, nu)
        comp = s * lam
        residual = float(np.linalg.norm(np.concatenate([rd, rp, re, comp])))
        if not np.isfinite(residual):
            raise Infeasible("non-finite iterate")
        primal = float(np.linalg.norm(np.concatenate([rp, re])))
        if rp0 is None:
            rp0 = primal
        elif primal > 1e8 * (1.0 + rp0):
            raise Infeasible(f"primal residual diverged to {primal:.3e}")
        if it > 0 and _farkas_certificate(problem, lam, nu):
            raise Infeasible("multipliers certify that the constraints cannot all hold")
        fac = _factor(lambda rr: _full_kkt(problem, s, lam, rr), reg, m, p, r, full=True)
        converged = residual <= config.tolerance
        if converged or it >= cap:
            return QpSolution(z, lam, nu, s, fac, it, residual, converged=converged)

        mu = float(s @ lam) / p
        # Newton system in (z, lam, nu): the slack step is ds = -rp - G dz and
        # the complementarity row becomes lam*G dz - s*dlam = comp - lam*rp
        # predictor (affine scaling) direction
        d_aff = fac.solve(np.concatenate([-rd, comp - lam * rp, -re]))
        ds_a, dl_a = -rp - problem.G @ d_aff[iz], d_aff[il]
        a_aff = min(1.0, _max_step(s, ds_a), _max_step(lam, dl_a))
        mu_aff = float((s + a_aff * ds_a) @ (lam + a_aff * dl_a)) / p
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector reuses the same factorization
        comp_c = comp + ds_a * dl_a - sigma * mu
        d = fac.solve(np.concatenate([-rd, comp_c - lam * rp, -re]))
        dz, dl, dv = d[iz], d[il], d[iv]
        ds = -rp - problem.G @ dz
        alpha = min(1.0, config.step_fraction * min(_max_step(s, ds), _max_step(lam, dl)))
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dl
        nu = nu + alpha * dv
        it += 1


def solve(problem: QpProblem, config: SolverConfig = SolverConfig(), initial=None) -> QpSolution:
    """Solve ``problem`` to ``config.tolerance`` or ``config.max_iterations``.

    ``initial`` optionally supplies a strictly interior ``(z, s, lam, nu)``
    starting point for the inequality-constrained path.
    """
    if problem.p == 0:
        return _equality_solve(problem, config)
    return _ipm(problem, config, config.max_iterations, initial)


def solve_capped(problem: QpProblem, config: SolverConfig, iteration_cap: int) -> QpSolution:
    """Run the same method for at most ``iteration_cap`` Newton steps.

    The returned point may be inexact; ``residual`` reports how far it is
    from satisfying the KKT conditions.
    """
    if iteration_cap < 1:
        raise ValueError("iteration_cap must be >= 1")
    if problem.p == 0:
        return _equality_solve(problem, config)
    return _ipm(problem, config, min(iteration_cap, config.max_iterations))


def kkt_residual(problem: QpProblem, candidate: QpSolution) -> np.ndarray:
    """Block norms ``[stationarity, complementarity, equality, inequality violation]``.

    Complementarity also absorbs any negative part of the multipliers so
    that all four entries vanish exactly at an optimum.
    """
    z = _as_vector(candidate.z_star, problem.m, "z_star")
    lam = _as_vector(candidate.lambda_star, problem.p, "lambda_star")
    nu = _as_vector(candidate.nu_star, problem.r, "nu_star")
    gz = problem.G @ z - problem.h
    stat = problem.P @ z + problem.q + problem.G.T @ lam + problem.A.T @ nu
    comp = np.concatenate([lam * gz, np.minimum(lam, 0.0)])
    return np.array([
        np.linalg.norm(stat),
        np.linalg.norm(comp),
        np.linalg.norm(problem.A @ z - problem.b),
        np.linalg.norm(np.maximum(gz, 0.0)),
    ])


def kkt_jacobian(problem: QpProblem, solution: QpSolution) -> np.ndarray:
    """Unregularized KKT Jacobian at ``solution``, ordered like its factorization."""
    if problem.p == 0:
        return _eq_kkt(problem, 0.0)
    return _full_kkt(problem, solution.slack, solution.lambda_star, 0.0)


def candidate(z, lam=None, nu=None) -> QpSolution:
    """Wrap a primal-dual guess as a :class:`QpSolution` for residual checks."""
    z = np.asarray(z, dtype=float)
    lam = np.zeros(0) if lam is None else np.asarray(lam, dtype=float)
    nu = np.zeros(0) if nu is None else np.asarray(nu, dtype=float)
    return QpSolution(z, lam, nu, np.zeros_like(lam), None, 0, float("nan"))
