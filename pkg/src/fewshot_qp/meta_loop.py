"""Episodic meta-training and meta-testing of an embedding with a convex base learner."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import base_learners as bl
from . import embedding as emb
from .episodes import ClassDataset, Episode, EpisodeConfig, sample_episode
from .qp_core import SolverConfig

log = logging.getLogger(__name__)

# learning-rate drops at 1/3, 2/3 and 5/6 of training, relative to the initial rate
SCHEDULE_FRACTIONS = ((0.0, 1.0), (1 / 3, 0.06), (2 / 3, 0.012), (5 / 6, 0.0024))


class NonFiniteScores(FloatingPointError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    learner: bl.LearnerConfig = field(default_factory=bl.LearnerConfig)
    embedding: emb.EmbeddingSpec = field(default_factory=emb.EmbeddingSpec)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    episodes_per_batch: int = 8
    epochs: int = 15
    episodes_per_epoch: int = 400
    lr: float = 0.1
    lr_schedule: Optional[Tuple[Tuple[int, float], ...]] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    gamma_init: float = 1.0
    label_smoothing_eps: float = 0.0
    val_episodes: int = 200

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.label_smoothing_eps < 0.5:
            raise ValueError("label_smoothing_eps must lie in [0, 0.5)")
        if self.episodes_per_batch < 1 or self.epochs < 0 or self.episodes_per_epoch < 0:
            raise ValueError("batch size must be >= 1 and epoch counts >= 0")
        if self.lr_schedule is not None:
            sched = tuple((int(e), float(v)) for e, v in self.lr_schedule)
            if not sched or sched[0][0] != 0:
                raise ValueError("lr_schedule must start at epoch 0")
            object.__setattr__(self, "lr_schedule", sched)

    def schedule(self) -> Tuple[Tuple[int, float], ...]:
        if self.lr_schedule is not None:
            return self.lr_schedule
        return tuple((int(round(frac * self.epochs)), self.lr * scale)
                     for frac, scale in SCHEDULE_FRACTIONS)

    def lr_at(self, epoch: int) -> float:
        lr = 0.0
        for start, value in self.schedule():
            if epoch >= start:
                lr = value
        return lr


@dataclass(frozen=True)
class EvalRecord:
    split: str
    shot: int
    accuracy: float
    std: float
    episodes: int
    ci95: float

    @classmethod
    def from_accuracies(cls, split: str, shot: int, accs: Sequence[float]) -> "EvalRecord":
        a = np.asarray(accs, dtype=float)
        std = float(a.std(ddof=1)) if a.size > 1 else 0.0
        return cls(split, shot, float(a.mean()), std, int(a.size),
                   1.96 * std / np.sqrt(max(a.size, 1)))


@dataclass
class RunMetrics:
    train_loss: List[float] = field(default_factory=list)
    evaluations: List[dict] = field(default_factory=list)
    best_epoch: int = 0


@dataclass
class ScaleParameter:
    gamma: float = 1.0


# ------------------------------------------------------------------ losses

def scores_loss(scores: np.ndarray, labels: np.ndarray, gamma: float, eps: float = 0.0):
    """Mean cross-entropy of ``softmax(gamma * scores)`` against (smoothed) labels.

    Returns ``(loss, dL_dscores, dL_dgamma)``.
    """
    scores = np.asarray(scores, dtype=float)
    if np.isnan(scores).any() or not np.isfinite(gamma):
        raise NonFiniteScores("scores contain NaN")
    nq, K = scores.shape
    target = np.full((nq, K), eps / (K - 1))
    target[np.arange(nq), labels] = 1.0 - eps
    logits = gamma * scores
    logits = logits - logits.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    logp = logits - logZ
    loss = float(-(target * logp).sum() / nq)
    resid = (np.exp(logp) - target) / nq
    return loss, gamma * resid, float((resid * scores).sum())


def episode_loss(weights: bl.ClassifierWeights, query_features: np.ndarray,
                 query_labels: np.ndarray, gamma: float, eps: float = 0.0):
    """Loss of linear scores ``W x``; returns ``(loss, dL_dW, dL_dquery, dL_dgamma)``."""
    Q = np.asarray(query_features, dtype=float)
    loss, dS, dgamma = scores_loss(weights.scores(Q), query_labels, gamma, eps)
    return loss, dS.T @ Q, dS @ weights.weights, dgamma


# ---------------------------------------------------------------- gradients

@dataclass
class EpisodeGrad:
    loss: float
    params: emb.ParameterStore
    gamma: float


def episode_gradient(params: emb.ParameterStore, gamma: float, episode: Episode,
                     config: MetaConfig) -> EpisodeGrad:
    """Loss on the query set and its gradient in the embedding parameters and ``gamma``."""
    n_s = episode.support_inputs.shape[0]
    X = np.concatenate([episode.support_inputs, episode.query_inputs])
    feats, tape = emb.forward(config.embedding, params, X)
    support = episode.support_set(feats[:n_s])
    Fq = feats[n_s:]
    result = bl.fit(support, config.learner, config.solver)
    loss, dS, dgamma = scores_loss(result.scores(Fq), episode.query_labels, gamma,
                                   config.label_smoothing_eps)
    dW, dFq = result.score_backward(Fq, dS)
    if result.kind == "nearest_class_mean":
        dFs = bl.prototype_backward(dW, support)
    else:
        dFs = bl.backward_to_support(result, dW, support)
    dparams, _ = emb.vjp(tape, np.concatenate([dFs, dFq]))
    return EpisodeGrad(loss, dparams, dgamma)


def batch_gradient(params, gamma, episodes: Sequence[Episode], config: MetaConfig,
                   pool: Optional[ThreadPoolExecutor] = None) -> EpisodeGrad:
    """Mean of per-episode gradients, reduced in episode order."""
    fn = lambda ep: episode_gradient(params, gamma, ep, config)  # noqa: E731
    grads = list(pool.map(fn, episodes)) if pool is not None else [fn(ep) for ep in episodes]
    n = len(grads)
    total = {k: np.zeros_like(v) for k, v in params.items()}
    loss = dgamma = 0.0
    for g in grads:
        for k in total:
            total[k] += g.params[k]
        loss += g.loss
        dgamma += g.gamma
    return EpisodeGrad(loss / n, {k: v / n for k, v in total.items()}, dgamma / n)


class NesterovSGD:
    """SGD with Nesterov momentum; weight decay touches the embedding only, never ``gamma``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: emb.ParameterStore, gamma: float, grad: EpisodeGrad, lr: float):
        mu = self.momentum
        new = {}
        for k, p in params.items():
            g = grad.params[k] + self.weight_decay * p
            v = mu * self.velocity.get(k, 0.0) + g
            self.velocity[k] = v
            new[k] = p - lr * (g + mu * v)
        vg = mu * self.velocity.get("__gamma__", 0.0) + grad.gamma
        self.velocity["__gamma__"] = vg
        return new, gamma - lr * (grad.gamma + mu * vg)


# -------------------------------------------------------------- evaluation

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def evaluate(params, gamma: float, spec: emb.EmbeddingSpec, dataset: ClassDataset, split: str,
             learner: bl.LearnerConfig, num_episodes: int, rng, way: int = 5, shot: int = 5,
             query: int = 15, solver: SolverConfig = SolverConfig(),
             shuffle_labels: bool = False, timings: Optional[list] = None) -> EvalRecord:
    """Mean query accuracy over ``num_episodes`` freshly sampled episodes.

    ``timings``, when given, collects ``(embed_seconds, fit_seconds)`` per episode.
    """
    rng = _rng(rng)
    accs = np.empty(num_episodes)
    for i in range(num_episodes):
        ep = sample_episode(dataset, split, way, shot, query, rng)
        labels = rng.permutation(ep.query_labels) if shuffle_labels else ep.query_labels
        t0 = time.perf_counter()
        n_s = ep.support_inputs.shape[0]
        feats, _ = emb.forward(spec, params, np.concatenate([ep.support_inputs, ep.query_inputs]))
        t1 = time.perf_counter()
        result = bl.fit(ep.support_set(feats[:n_s]), learner, solver)
        scores = result.scores(feats[n_s:])
        t2 = time.perf_counter()
        if timings is not None:
            timings.append((t1 - t0, t2 - t1))
        accs[i] = np.mean(np.argmax(gamma * scores, axis=1) == labels)
    return EvalRecord.from_accuracies(split, shot, accs)


# ---------------------------------------------------------------- training

def _dump_nonfinite(epoch, batch, params, gamma, loss):
    state = {"epoch": epoch, "batch": batch, "loss": loss, "gamma": gamma,
             "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()}}
    log.error("non-finite loss: %s", json.dumps(state))
    return state


def meta_train(config: MetaConfig, dataset: ClassDataset, seed: int = 0, workers: int = 1,
               on_record: Optional[Callable[[dict], None]] = None, init_params=None):
    """Train the embedding and ``gamma``; returns ``(params, ScaleParameter, RunMetrics)``.

    The returned parameters are those with the best meta-validation accuracy
    over epochs ``0..epochs`` (epoch 0 being the initialization).
    ``on_record`` receives one dict per evaluation, in order.
    """
    ss = np.random.SeedSequence(seed)
    init_ss, train_ss, val_ss = ss.spawn(3)
    params = emb.init_params(config.embedding, np.random.default_rng(init_ss)) \
        if init_params is None else {k: v.copy() for k, v in init_params.items()}
    gamma = float(config.gamma_init)
    train_rng = np.random.default_rng(train_ss)
    val_seed = int(val_ss.generate_state(1)[0])
    ec = config.episodes
    metrics = RunMetrics()
    opt = NesterovSGD(config.momentum, config.weight_decay)

    def validate(epoch, train_loss):
        if config.val_episodes <= 0 or not dataset.splits.get("meta_val"):
            return -np.inf
        rec = evaluate(params, gamma, config.embedding, dataset, "meta_val", config.learner,
                       config.val_episodes, np.random.default_rng(val_seed), ec.way, ec.test_shot,
                       ec.test_query_count, config.solver)
        entry = {"epoch": epoch, "lr": config.lr_at(max(epoch - 1, 0)), "train_loss": train_loss,
                 "gamma": gamma, **rec.__dict__}
        metrics.evaluations.append(entry)
        if on_record is not None:
            on_record(entry)
        return rec.accuracy

    best_acc = validate(0, None)
    best = ({k: v.copy() for k, v in params.items()}, gamma, 0)
    batches = config.episodes_per_epoch // config.episodes_per_batch
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            losses = []
            for b in range(batches):
                eps = [sample_episode(dataset, "meta_train", ec.way, ec.train_shot,
                                      ec.query_count, train_rng)
                       for _ in range(config.episodes_per_batch)]
                grad = batch_gradient(params, gamma, eps, config, pool)
                if not np.isfinite(grad.loss):
                    state = _dump_nonfinite(epoch, b, params, gamma, grad.loss)
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch} batch {b}: {state}")
                losses.append(grad.loss)
                if lr > 0:
                    params, gamma = opt.step(params, gamma, grad, lr)
            mean_loss = float(np.mean(losses)) if losses else None
            metrics.train_loss.append(mean_loss)
            acc = validate(epoch + 1, mean_loss)
            if acc > best_acc:
                best_acc = acc
                best = ({k: v.copy() for k, v in params.items()}, gamma, epoch + 1)
    finally:
        if pool is not None:
            pool.shutdown()
    if best_acc == -np.inf:
        # no validation split: keep the final model
        best = (params, gamma, config.epochs)
    metrics.best_epoch = best[2]
    return best[0], ScaleParameter(best[1]), metrics
