"""Convex base learners fitted on an episode's support set.

Both QP learners are solved in the dual, over ``n_s * K`` variables stored
class-major: variable ``k * n_s + n`` is ``alpha[n, k]``. Weights are
recovered as ``W = alpha' F`` so scores on a query ``x`` are ``W x``.

Crammer-Singer SVM dual (minimization form)::

    min  1/2 sum_k a_k' (F F') a_k  -  sum_n a_n^{y_n}
    s.t. a_n^{y_n} <= C,  a_n^k <= 0 (k != y_n),  sum_k a_n^k = 0

Ridge regression dual::

    min  1/2 sum_k a_k' (F F' + lam I) a_k  -  sum_n a_n^{y_n}

The slack variables of the SVM primal never appear: they are eliminated by
the dual transformation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import qp_grad
from .qp_core import DimensionMismatch, QpProblem, QpSolution, SolverConfig, solve_capped

LEARNER_KINDS = ("svm_cs", "ridge", "nearest_class_mean")
SVM_GRAM_SHIFT = 1e-8


class DegenerateClass(ValueError):
    pass


@dataclass(frozen=True)
class SupportSet:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        F = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=int).reshape(-1)
        if F.ndim != 2 or F.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"features {F.shape} do not match {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "features", F)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def one_hot(self) -> np.ndarray:
        Y = np.zeros((self.size, self.num_classes))
        Y[np.arange(self.size), self.labels] = 1.0
        return Y

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class DualVariables:
    alpha: np.ndarray  # (n_s, K)

    @classmethod
    def from_qp(cls, z: np.ndarray, n_s: int, num_classes: int) -> "DualVariables":
        return cls(np.asarray(z).reshape(num_classes, n_s).T.copy())

    def as_qp_vector(self) -> np.ndarray:
        return self.alpha.T.reshape(-1)


@dataclass(frozen=True)
class ClassifierWeights:
    weights: np.ndarray  # (K, d), bias-free

    def scores(self, queries: np.ndarray) -> np.ndarray:
        return np.asarray(queries) @ self.weights.T


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "svm_cs"
    svm_c: float = 0.1
    ridge_lambda: float = 50.0
    qp_iteration_cap: Optional[int] = 3

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if not self.svm_c > 0:
            raise ValueError("svm_c must be > 0")
        if not self.ridge_lambda > 0:
            raise ValueError("ridge_lambda must be > 0")
        if self.qp_iteration_cap is not None and self.qp_iteration_cap < 1:
            raise ValueError("qp_iteration_cap must be >= 1 or None (run to tolerance)")


def gram_matrix(support: SupportSet) -> np.ndarray:
    F = support.features
    if F.shape[1] < 1:
        raise DimensionMismatch("features need at least one dimension")
    return F @ F.T


def _require_all_classes(support: SupportSet) -> None:
    missing = np.flatnonzero(support.class_counts() == 0)
    if missing.size:
        raise DegenerateClass(f"classes {missing.tolist()} have no support examples")


def _label_vector(support: SupportSet) -> np.ndarray:
    # -1 at (n, y_n) in class-major order
    return -support.one_hot().T.reshape(-1)


def svm_cs_dual_qp(support: SupportSet, c: float) -> QpProblem:
    if not c > 0:
        raise ValueError("c must be > 0")
    _require_all_classes(support)
    n, K = support.size, support.num_classes
    m = n * K
    gram = gram_matrix(support) + SVM_GRAM_SHIFT * np.eye(n)
    P = np.kron(np.eye(K), gram)
    G = np.eye(m)
    h = c * support.one_hot().T.reshape(-1)
    A = np.kron(np.ones((1, K)), np.eye(n))
    return QpProblem(P, _label_vector(support), G, h, A, np.zeros(n))


def ridge_dual_qp(support: SupportSet, lam: float) -> QpProblem:
    if not lam > 0:
        raise ValueError("lam must be > 0")
    n, K = support.size, support.num_classes
    block = gram_matrix(support) + lam * np.eye(n)
    return QpProblem(np.kron(np.eye(K), block), _label_vector(support))


def dual_to_weights(alpha: DualVariables, support: SupportSet) -> ClassifierWeights:
    a = np.asarray(alpha.alpha)
    if a.shape != (support.size, support.num_classes):
        raise DimensionMismatch(
            f"alpha has shape {a.shape}, expected {(support.size, support.num_classes)}")
    return ClassifierWeights(a.T @ support.features)


def class_means(support: SupportSet) -> np.ndarray:
    counts = support.class_counts()
    if np.any(counts == 0):
        raise DegenerateClass("every class needs at least one support example")
    return (support.one_hot().T @ support.features) / counts[:, None]


def ncm_scores(prototypes: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Negative squared distance to each prototype, divided by the feature dimension."""
    queries = np.asarray(queries, dtype=float)
    diff = queries[:, None, :] - prototypes[None, :, :]
    return -np.sum(diff * diff, axis=2) / prototypes.shape[1]


def nearest_class_mean(support: SupportSet):
    """Return ``score(queries) -> (n_q, K)`` for the class-mean classifier."""
    prototypes = class_means(support)
    return lambda queries: ncm_scores(prototypes, queries)


@dataclass(frozen=True)
class FitResult:
    kind: str
    weights: ClassifierWeights
    duals: Optional[DualVariables] = None
    solution: Optional[QpSolution] = None
    problem: Optional[QpProblem] = None

    def scores(self, queries: np.ndarray) -> np.ndarray:
        if self.kind == "nearest_class_mean":
            return ncm_scores(self.weights.weights, queries)
        return self.weights.scores(queries)

    def score_backward(self, queries: np.ndarray, dL_dscores: np.ndarray):
        """Pull score gradients back to ``(dL_dweights, dL_dqueries)``.

        For the class-mean learner ``weights`` holds the prototypes.
        """
        W = self.weights.weights
        if self.kind == "nearest_class_mean":
            d = W.shape[1]
            diff = queries[:, None, :] - W[None, :, :]
            coef = (-2.0 / d) * dL_dscores[:, :, None] * diff
            return -coef.sum(axis=0), coef.sum(axis=1)
        return dL_dscores.T @ queries, dL_dscores @ W


def fit(support: SupportSet, config: LearnerConfig,
        solver_config: SolverConfig = SolverConfig()) -> FitResult:
    if config.kind == "nearest_class_mean":
        return FitResult(config.kind, ClassifierWeights(class_means(support)))
    if config.kind == "svm_cs":
        problem = svm_cs_dual_qp(support, config.svm_c)
    else:
        problem = ridge_dual_qp(support, config.ridge_lambda)
    cap = solver_config.max_iterations if config.qp_iteration_cap is None else config.qp_iteration_cap
    solution = solve_capped(problem, solver_config, cap)
    duals = DualVariables.from_qp(solution.z_star, support.size, support.num_classes)
    return FitResult(config.kind, dual_to_weights(duals, support), duals, solution, problem)


def backward_to_support(result: FitResult, dL_dweights: np.ndarray,
                        support: SupportSet) -> np.ndarray:
    """Gradient of the loss on the support features through a QP fit.

    Sums the explicit dependence of ``W = alpha' F`` on ``F`` and the
    implicit one through the Gram blocks of the dual QP.
    """
    if result.solution is None or result.problem is None:
        raise qp_grad.StaleFactorization("fit result carries no QP solution")
    F = support.features
    n, K = support.size, support.num_classes
    dW = np.asarray(dL_dweights, dtype=float)
    alpha = result.duals.alpha
    dL_dalpha = F @ dW.T  # (n, K)
    grads = qp_grad.backward(result.problem, result.solution, dL_dalpha.T.reshape(-1))
    blocks = grads.dP.reshape(K, n, K, n)
    d_gram = np.einsum("kikj->ij", blocks)
    return alpha @ dW + (d_gram + d_gram.T) @ F


def prototype_backward(dL_dprototypes: np.ndarray, support: SupportSet) -> np.ndarray:
    """Scatter prototype gradients back to the support rows (each gets 1/N of its class)."""
    counts = support.class_counts()
    return (dL_dprototypes / counts[:, None])[support.labels]
