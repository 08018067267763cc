"""Oracle check suites shared by the ``selftest`` command and the acceptance tests.

Each check returns a :class:`CheckResult` with the worst observed error and
the threshold it was compared against. Problem counts are parameters so the
CLI can run quick versions while the test-suite runs the full ones.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import base_learners as bl
from . import embedding as emb
from . import oracles, qp_grad
from .episodes import sample_episode, synthetic_task_distribution
from .meta_loop import scores_loss
from .qp_core import QpProblem, SolverConfig, solve, solve_capped

TIGHT = SolverConfig(tolerance=1e-12, max_iterations=100)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    threshold: float
    count: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: worst={self.worst:.3e} threshold={self.threshold:.1e} "
                f"n={self.count} time={self.seconds:.2f}s")


def _timed(name: str, threshold: float, count: int, body: Callable[[], float],
           time_limit: float = np.inf) -> CheckResult:
    t0 = time.perf_counter()
    worst = body()
    dt = time.perf_counter() - t0
    return CheckResult(name, bool(worst <= threshold and dt < time_limit), worst, threshold,
                       count, dt)


def qp_against_active_set(num: int = 200, seed: int = 0, tol: float = 1e-6,
                          solver: SolverConfig = SolverConfig(tolerance=1e-10),
                          time_limit: float = 10.0) -> CheckResult:
    """IPM vs. active-set enumeration on random QPs with m <= 30, p <= 10, r <= 3."""
    rng = np.random.default_rng(seed)
    problems = []
    for _ in range(num):
        m = int(rng.integers(4, 31))
        p = int(rng.integers(0, 11))
        r = int(rng.integers(0, min(3, m - 1) + 1))
        problems.append(oracles.random_qp(rng, m, p, r))
    refs = [oracles.active_set_enumeration(pr)[0] for pr in problems]

    def body():
        return max(float(np.max(np.abs(solve(pr, solver).z_star - z)))
                   for pr, z in zip(problems, refs))

    # the time limit covers the solver, not the exponential oracle
    return _timed("qp_active_set_oracle", tol, num, body, time_limit)


def relative_gap(analytic: float, fd: float, floor: float = 1e-4) -> float:
    return abs(analytic - fd) / max(abs(analytic), abs(fd), floor)


def _random_direction(rng, problem: QpProblem) -> qp_grad.QpGradients:
    D = rng.standard_normal(problem.P.shape)
    return qp_grad.QpGradients(
        0.5 * (D + D.T), rng.standard_normal(problem.m), rng.standard_normal(problem.G.shape),
        rng.standard_normal(problem.p), rng.standard_normal(problem.A.shape),
        rng.standard_normal(problem.r))


def _block_only(direction: qp_grad.QpGradients, index: int) -> qp_grad.QpGradients:
    parts = [d if i == index else np.zeros_like(d) for i, d in enumerate(direction.as_tuple())]
    return qp_grad.QpGradients(*parts)


def qp_gradient_blocks(num: int = 100, seed: int = 1, tol: float = 1e-4,
                       step: float = 1e-5) -> CheckResult:
    """Every coefficient-block gradient of ``w . z*`` against central differences.

    Each block is probed along one random direction (symmetric for ``P``)
    on strictly complementary QPs with m in 5..30, p in 0..10, r in 0..3.
    """
    rng = np.random.default_rng(seed)

    def body():
        worst = 0.0
        for _ in range(num):
            m = int(rng.integers(5, 31))
            p = int(rng.integers(0, 11))
            r = int(rng.integers(0, 4))
            problem, *_ = oracles.random_complementary_qp(rng, m, p, r)
            w = rng.standard_normal(m)
            grads = qp_grad.backward(problem, solve(problem, TIGHT), w)
            direction = _random_direction(rng, problem)
            for i in range(6):
                d = _block_only(direction, i)
                if d.as_tuple()[i].size == 0:
                    continue
                lp = w @ solve(qp_grad.perturbed(problem, d, step), TIGHT).z_star
                lm = w @ solve(qp_grad.perturbed(problem, d, -step), TIGHT).z_star
                worst = max(worst, relative_gap(grads.dot(d), (lp - lm) / (2 * step)))
        return worst

    return _timed("qp_implicit_gradient_fd", tol, num, body)


def _random_support(rng, way: int, shot: int, dim: int) -> bl.SupportSet:
    labels = np.repeat(np.arange(way), shot)
    return bl.SupportSet(rng.standard_normal((way * shot, dim)), labels, way)


def ridge_closed_form(num: int = 100, seed: int = 2, tol: float = 1e-8,
                      lam: float = 50.0) -> CheckResult:
    """Ridge through the QP path, capped at one iteration, vs. ``(Gram + lam I)^{-1} Y``."""
    rng = np.random.default_rng(seed)

    def body():
        worst = 0.0
        for _ in range(num):
            support = _random_support(rng, int(rng.integers(2, 6)), int(rng.integers(1, 6)),
                                      int(rng.integers(4, 33)))
            problem = bl.ridge_dual_qp(support, lam)
            gram = bl.gram_matrix(support)
            direct = np.linalg.solve(gram + lam * np.eye(support.size), support.one_hot())
            for sol in (solve(problem), solve_capped(problem, SolverConfig(), 1)):
                alpha = bl.DualVariables.from_qp(sol.z_star, support.size,
                                                 support.num_classes).alpha
                worst = max(worst, float(np.max(np.abs(alpha - direct))))
        return worst

    return _timed("ridge_closed_form", tol, num, body)


def svm_against_projected_gradient(num: int = 50, seed: int = 3, tol: float = 1e-6,
                                   c: float = 0.1) -> CheckResult:
    """Dual objective of the QP-path SVM vs. an accelerated projected-gradient solve."""
    rng = np.random.default_rng(seed)

    def body():
        worst = 0.0
        for _ in range(num):
            way = int(rng.integers(2, 6))
            support = _random_support(rng, way, int(rng.integers(1, 6)), int(rng.integers(2, 33)))
            result = bl.fit(support, bl.LearnerConfig("svm_cs", svm_c=c, qp_iteration_cap=None),
                            SolverConfig(tolerance=1e-10))
            gram = bl.gram_matrix(support) + bl.SVM_GRAM_SHIFT * np.eye(support.size)
            ref = oracles.cs_svm_projected_gradient(gram, support.labels, way, c)
            f_qp = oracles.cs_svm_dual_objective(result.duals.alpha, gram, support.labels)
            f_ref = oracles.cs_svm_dual_objective(ref, gram, support.labels)
            worst = max(worst, abs(f_qp - f_ref))
        return worst

    return _timed("svm_dual_projected_gradient", tol, num, body)


def svm_analytic_two_way(tol: float = 1e-8) -> CheckResult:
    """2-way 1-shot episode with orthonormal features; the dual is ``+-min(C, 1/2)``.

    ``C = 1/2`` itself is left out: there the box bound is weakly active
    (zero multiplier), the optimum is degenerate and interior-point iterates
    approach it only like the square root of the residual.
    """
    def body():
        worst = 0.0
        for c in (0.05, 0.1, 0.3, 1.0, 5.0):
            support = bl.SupportSet(np.eye(2, 6), np.array([0, 1]), 2)
            result = bl.fit(support, bl.LearnerConfig("svm_cs", svm_c=c, qp_iteration_cap=None),
                            SolverConfig(tolerance=1e-12, max_iterations=100))
            a = min(c, 0.5)
            expect = np.array([[a, -a], [-a, a]])
            worst = max(worst, float(np.max(np.abs(result.duals.alpha - expect))))
        return worst

    return _timed("svm_analytic_two_way", tol, 5, body)


def _frozen_episode_loss(spec, params, episode, learner, solver):
    n_s = episode.support_inputs.shape[0]
    feats, tape = emb.forward(spec, params, np.concatenate([episode.support_inputs,
                                                            episode.query_inputs]))
    support = episode.support_set(feats[:n_s])
    result = bl.fit(support, learner, solver)
    Fq = feats[n_s:]
    loss, dS, _ = scores_loss(result.scores(Fq), episode.query_labels, 1.0)
    return loss, (tape, result, support, Fq, dS)


def end_to_end_gradient(kind: str, seed: int = 4, tol: float = 1e-3, step: float = 1e-6,
                        trials: int = 5) -> CheckResult:
    """Query loss gradient in the embedding parameters vs. central differences."""
    rng = np.random.default_rng(seed)
    spec = emb.EmbeddingSpec("linear", 12, 6)
    learner = bl.LearnerConfig(kind, svm_c=0.1, ridge_lambda=1.0, qp_iteration_cap=None)
    data = synthetic_task_distribution((0, 0, 6), informative_dim=4, noise_dim=8,
                                       items_per_class=10, rng=rng)

    def body():
        worst = 0.0
        for _ in range(trials):
            params = emb.init_params(spec, rng)
            episode = sample_episode(data, "meta_test", 2, 1, 3, rng)
            loss, (tape, result, support, Fq, dS) = _frozen_episode_loss(
                spec, params, episode, learner, TIGHT)
            dW, dFq = result.score_backward(Fq, dS)
            dFs = bl.backward_to_support(result, dW, support)
            grads, _ = emb.vjp(tape, np.concatenate([dFs, dFq]))
            direction = {k: rng.standard_normal(v.shape) for k, v in params.items()}
            analytic = sum(float(np.sum(grads[k] * direction[k])) for k in params)
            lp = _frozen_episode_loss(spec, {k: params[k] + step * direction[k] for k in params},
                                      episode, learner, TIGHT)[0]
            lm = _frozen_episode_loss(spec, {k: params[k] - step * direction[k] for k in params},
                                      episode, learner, TIGHT)[0]
            worst = max(worst, relative_gap(analytic, (lp - lm) / (2 * step), floor=1e-8))
        return worst

    return _timed(f"end_to_end_gradient_{kind}", tol, trials, body)


def episode_protocol(num: int = 10_000, seed: int = 5) -> CheckResult:
    """Support/query disjointness, exact per-class counts and split hygiene."""
    rng = np.random.default_rng(seed)
    data = synthetic_task_distribution((20, 8, 10), informative_dim=4, noise_dim=2,
                                       items_per_class=12, rng=rng)
    split_of = {c: s for s, ids in data.splits.items() for c in ids}

    def body():
        bad = 0
        for i in range(num):
            split = ("meta_train", "meta_val", "meta_test")[i % 3]
            way = int(rng.integers(2, 6))
            shot = int(rng.integers(1, 6))
            query = int(rng.integers(1, 12 - shot + 1))
            ep = sample_episode(data, split, way, shot, query, rng)
            ok = len(set(ep.class_ids.tolist())) == way
            ok &= all(split_of[int(c)] == split for c in ep.class_ids)
            for k in range(way):
                s_idx = ep.support_index[ep.support_labels == k]
                q_idx = ep.query_index[ep.query_labels == k]
                ok &= s_idx.size == shot and q_idx.size == query
                ok &= not set(s_idx.tolist()) & set(q_idx.tolist())
                pool = data.items[int(ep.class_ids[k])]
                ok &= np.array_equal(pool[s_idx], ep.support_inputs[ep.support_labels == k])
            bad += not ok
        return float(bad)

    return _timed("episode_protocol", 0.0, num, body)


def selftest_suite(quick: bool = True) -> List[CheckResult]:
    s = 0.2 if quick else 1.0
    return [
        qp_against_active_set(int(200 * s)),
        qp_gradient_blocks(int(100 * s)),
        ridge_closed_form(int(100 * s)),
        svm_against_projected_gradient(int(50 * s)),
        svm_analytic_two_way(),
        end_to_end_gradient("ridge"),
        end_to_end_gradient("svm_cs"),
        episode_protocol(int(10_000 * s)),
    ]
