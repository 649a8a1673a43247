"""Training log-linear models on charts of distant-supervision structures.

The loss for a sentence is ``-log sum_{y in chart} p(y | x)``; its gradient is
the model's expected features minus its expected features restricted to the
chart. Weights are pulled towards an initialiser ``theta0`` by
``lam * ||theta - theta0||^2``.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Optional, Sequence

import numpy as np

from . import chain, dep
from .conllu import Corpus, Sentence
from .ensemble import (
    DEFAULT_SIGMA,
    ChartSpec,
    EnsembleSpec,
    lop_chart,
    mv_predict,
    pptx_chart,
    singleton_chart,
)
from .model import ArcFeatures, ChainFeatures, Features, ScoringModel, gold_structure, inventory
from .structures import PARSING, TAGGING, DepTree, Structure, TagSeq, logsumexp, tree_score

logger = logging.getLogger(__name__)

METHODS = ("pptx", "lop", "mv-pseudo")

# Best values from random search, per task (eta, lambda).
DEFAULT_ETA = {PARSING: 9.4e-5, TAGGING: 2.6e-4}
DEFAULT_LAMBDA = {PARSING: 1.6e-4, TAGGING: 4.7e-3}
DEFAULT_EPOCHS = {PARSING: 5, TAGGING: 10}
DEFAULT_MAX_LENGTH = {PARSING: dep.MAX_PARSE_LENGTH, TAGGING: chain.MAX_TAG_LENGTH}


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    eta: float
    lam: float
    epochs: int
    batch_size: int = 80
    sigma: float = DEFAULT_SIGMA
    seed: int = 0
    max_length: int = 30

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.max_length < 1:
            raise ValueError("epochs, batch_size and max_length must be positive")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must be in [0, 1]")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "TrainConfig":
        values = dict(
            eta=DEFAULT_ETA[task],
            lam=DEFAULT_LAMBDA[task],
            epochs=DEFAULT_EPOCHS[task],
            max_length=DEFAULT_MAX_LENGTH[task],
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# chart probability and gradient


def _structure_log_score(scores, structure: Structure) -> float:
    if isinstance(structure, DepTree):
        return tree_score(scores.scores, structure, scores.labels)
    return chain.sequence_score(scores, structure)


def _log_parts(scores, chart: ChartSpec) -> tuple[float, list[float]]:
    if chart.task == PARSING:
        masked = dep.dep_log_partition(scores, chart.mask)
    else:
        masked = chain.chain_log_partition(scores, chart.mask)
    return masked, [_structure_log_score(scores, e) for e in chart.extras]


def _chart_log_sum(masked: float, extra_scores: Sequence[float]) -> float:
    parts = [masked] + list(extra_scores)
    if all(p == -np.inf for p in parts):
        raise ValueError("chart contains no structure")
    return float(logsumexp(parts))


def _full_log_partition(scores) -> float:
    if isinstance(scores, dep.ArcScores):
        return dep.dep_log_partition(scores)
    return chain.chain_log_partition(scores)


def chart_log_prob(
    model: ScoringModel, sentence: Sentence, chart: ChartSpec, feats: Optional[Features] = None
) -> float:
    """``log sum_{y in chart} p(y | x)`` under the model."""
    if chart.labels != model.labels or chart.n != len(sentence):
        raise ValueError(f"chart does not match sentence {sentence.id!r}")
    scores = model.score_features(feats if feats is not None else model.featurize(sentence))
    masked, extra = _log_parts(scores, chart)
    return min(_chart_log_sum(masked, extra) - _full_log_partition(scores), 0.0)


def _extra_scores(scores, chart: ChartSpec) -> list[float]:
    return [_structure_log_score(scores, e) for e in chart.extras]


def _arc_expectation_gap(scores: dep.ArcScores, chart: ChartSpec) -> tuple[float, np.ndarray]:
    log_z, gap = dep.dep_partition_and_marginals(scores)
    masked, masked_marg = dep.dep_partition_and_marginals(scores, chart.mask)
    extra = _extra_scores(scores, chart)
    log_c = _chart_log_sum(masked, extra)
    if masked_marg is not None:
        gap -= np.exp(masked - log_c) * masked_marg
    index = {l: k for k, l in enumerate(scores.labels)}
    for tree, s in zip(chart.extras, extra):
        w = np.exp(s - log_c)
        for j, (h, l) in enumerate(zip(tree.heads, tree.labels), start=1):
            gap[h, j, index[l]] -= w
    return log_c - log_z, gap


def _chain_expectations(scores: chain.ChainScores, mask) -> tuple[float, Optional[tuple[np.ndarray, np.ndarray]]]:
    log_z, marg = chain.chain_partition_and_marginals(scores, mask)
    if marg is None:
        return log_z, None
    if scores.n == 1:
        return log_z, (marg[None, :], np.zeros_like(scores.trans))
    return log_z, (chain.unary_from_pairs(marg), marg.sum(axis=0))


def _chain_expectation_gap(scores: chain.ChainScores, chart: ChartSpec) -> tuple[float, np.ndarray, np.ndarray]:
    log_z, (emit_gap, trans_gap) = _chain_expectations(scores, None)
    masked, masked_exp = _chain_expectations(scores, chart.mask)
    extra = _extra_scores(scores, chart)
    log_c = _chart_log_sum(masked, extra)
    if masked_exp is not None:
        w = np.exp(masked - log_c)
        emit_gap = emit_gap - w * masked_exp[0]
        trans_gap = trans_gap - w * masked_exp[1]
    index = {t: k for k, t in enumerate(scores.tags)}
    for seq, s in zip(chart.extras, extra):
        w = np.exp(s - log_c)
        y = [index[t] for t in seq.tags]
        emit_gap[np.arange(len(y)), y] -= w
        for a, b in zip(y, y[1:]):
            trans_gap[a, b] -= w
    return log_c - log_z, emit_gap, trans_gap


def _accumulate(grad: np.ndarray, feats: Features, scores, chart: ChartSpec) -> float:
    """Add the sentence's loss gradient into ``grad``; return its chart log-probability."""
    if isinstance(feats, ArcFeatures):
        log_p, gap = _arc_expectation_gap(scores, chart)
        k = feats.index.shape[-1]
        np.add.at(grad, feats.index.reshape(-1), np.repeat(gap.reshape(-1), k))
    else:
        log_p, emit_gap, trans_gap = _chain_expectation_gap(scores, chart)
        k = feats.emit.shape[-1]
        np.add.at(grad, feats.emit.reshape(-1), np.repeat(emit_gap.reshape(-1), k))
        np.add.at(grad, feats.trans.reshape(-1), trans_gap.reshape(-1))
    return min(log_p, 0.0)


def loss_and_gradient(
    model: ScoringModel,
    batch: Sequence[tuple[Sentence, ChartSpec]],
    lam: float,
    theta0: Optional[np.ndarray] = None,
    feats: Optional[Sequence[Features]] = None,
) -> tuple[float, np.ndarray]:
    """Regularised chart loss of a batch and its exact gradient."""
    if not batch:
        raise ValueError("empty batch")
    grad = np.zeros_like(model.weights)
    loss = 0.0
    for b, (sentence, chart) in enumerate(batch):
        f = feats[b] if feats is not None else model.featurize(sentence)
        loss -= _accumulate(grad, f, model.score_features(f), chart)
    if lam:
        diff = model.weights if theta0 is None else model.weights - theta0
        loss += lam * float(diff @ diff)
        grad += 2.0 * lam * diff
    return loss, grad


def objective(
    model: ScoringModel,
    examples: Sequence[tuple[Sentence, ChartSpec]],
    lam: float,
    theta0: np.ndarray,
    feats: Optional[Sequence[Features]] = None,
) -> float:
    total = 0.0
    for b, (sentence, chart) in enumerate(examples):
        total -= chart_log_prob(model, sentence, chart, feats[b] if feats is not None else None)
    diff = model.weights - theta0
    return total + lam * float(diff @ diff)


# trainers


@dataclasses.dataclass
class TrainResult:
    model: ScoringModel
    history: list[float]


def fit(
    model: ScoringModel,
    examples: Sequence[tuple[Sentence, ChartSpec]],
    config: TrainConfig,
    theta0: np.ndarray,
    track_objective: bool = False,
    on_epoch: Optional[Callable[[int, ScoringModel], None]] = None,
) -> TrainResult:
    """Minibatch gradient descent from ``model``'s weights.

    The regulariser is applied through its exact proximal step so that large
    ``lam`` cannot make the iteration diverge; over one epoch the minibatch
    regularisers add up to ``config.lam``.
    """
    if not examples:
        raise ValueError("no training examples")
    feats = [model.featurize(s) for s, _ in examples]
    rng = np.random.default_rng(config.seed)
    theta = model.weights.copy()
    theta0 = np.asarray(theta0, dtype=np.float64)
    history: list[float] = []
    n = len(examples)
    current = model.with_weights(theta)
    if track_objective:
        history.append(objective(current, examples, config.lam, theta0, feats))
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            current = model.with_weights(theta)
            batch = [examples[i] for i in idx]
            loss, grad = loss_and_gradient(current, batch, 0.0, theta0, [feats[i] for i in idx])
            running += loss
            lam_b = config.lam * len(idx) / n
            theta = (theta - config.eta * grad + 2.0 * config.eta * lam_b * theta0) / (1.0 + 2.0 * config.eta * lam_b)
        current = model.with_weights(theta)
        if track_objective:
            history.append(objective(current, examples, config.lam, theta0, feats))
        else:
            history.append(running)
        logger.info("epoch %d: loss %.6g", epoch + 1, history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, current)
    return TrainResult(model.with_weights(theta), history)


def filter_length(corpus: Corpus, max_length: int) -> list[Sentence]:
    return [s for s in corpus if len(s) <= max_length]


def build_charts(
    ensemble: EnsembleSpec, sentences: Sequence[Sentence], method: str, sigma: float = DEFAULT_SIGMA
) -> list[ChartSpec]:
    if method == "pptx":
        return [pptx_chart(ensemble, s, sigma) for s in sentences]
    if method == "lop":
        return [lop_chart(ensemble, s, sigma) for s in sentences]
    if method == "mv-pseudo":
        return [singleton_chart(mv_predict(ensemble, s), ensemble.labels) for s in sentences]
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def train_target(
    sources: EnsembleSpec,
    unlabelled: Corpus,
    method: str,
    config: TrainConfig,
    charts: Optional[Sequence[ChartSpec]] = None,
    track_objective: bool = False,
) -> TrainResult:
    """Train a target model on distant-supervision charts, starting from (and
    regularised towards) the first source's weights."""
    sentences = filter_length(unlabelled, config.max_length)
    if not sentences:
        raise ValueError(f"no sentences within the length cap of {config.max_length}")
    if charts is None:
        charts = build_charts(sources, sentences, method, config.sigma)
    elif len(charts) != len(sentences):
        raise ValueError("need one chart per retained sentence")
    init = sources.sources[0]
    theta0 = init.weights.copy()
    return fit(init.with_weights(theta0), list(zip(sentences, charts)), config, theta0, track_objective)


def train_supervised(
    labelled: Corpus,
    task: str,
    config: TrainConfig,
    labels: Optional[Sequence[str]] = None,
    templates: Optional[Sequence[str]] = None,
    hash_dim: Optional[int] = None,
    hash_seed: int = 0,
    track_objective: bool = False,
) -> TrainResult:
    """Maximum-likelihood training on gold structures, from zero weights."""
    sentences = filter_length(labelled, config.max_length)
    if not sentences:
        raise ValueError(f"no sentences within the length cap of {config.max_length}")
    labels = tuple(labels) if labels is not None else inventory(sentences, task)
    kwargs = {} if hash_dim is None else {"hash_dim": hash_dim}
    model = ScoringModel.zeros(task, labels, templates, hash_seed=hash_seed, **kwargs)
    examples = [(s, singleton_chart(gold_structure(s, task), labels)) for s in sentences]
    return fit(model, examples, config, np.zeros_like(model.weights), track_objective)
