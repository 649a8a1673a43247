"""Distant-supervision charts from an ensemble of source models.

Two ways of choosing the allowed substructures at each position:

* ``pptx``: threshold every source's marginals separately, then take the union.
* ``lop``: pool the sources' marginals in a logarithmic opinion pool (a
  weighted, renormalised geometric mean), then threshold the pool.

Either way, each source's 1-best structure is added to the chart on top of the
structures the mask induces.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import softmax

from . import chain, dep
from .chain import PairMask
from .conllu import Corpus, Sentence
from .model import ScoringModel, gold_flat_indices, gold_structure
from .structures import (
    PARSING,
    TAGGING,
    DepTree,
    Structure,
    SubstructureDist,
    TagSeq,
    arc_support,
    arcs_to_flat,
    flat_to_arcs,
    logsumexp,
    tree_in_mask,
    tree_to_mask,
)

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.95
PROB_FLOOR = 1e-12
_MASS_TOL = 1e-12


# charts


@dataclasses.dataclass(frozen=True)
class ChartSpec:
    """Allowed-substructure mask plus explicitly listed structures outside it.

    ``mask`` is an ``(n+1, n+1, L)`` boolean array for parsing and a
    :class:`PairMask` for tagging.
    """

    task: str
    labels: tuple[str, ...]
    mask: Union[np.ndarray, PairMask]
    extras: tuple[Structure, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "extras", tuple(self.extras))
        for e in self.extras:
            if self.in_mask(e):
                raise ValueError("extra structure is already induced by the mask")

    @property
    def n(self) -> int:
        if self.task == PARSING:
            return self.mask.shape[0] - 1
        return self.mask.n

    def in_mask(self, structure: Structure) -> bool:
        if self.task == PARSING:
            return tree_in_mask(structure, self.mask, self.labels)
        return chain.sequence_in_mask(structure, self.mask, self.labels)

    def __contains__(self, structure: Structure) -> bool:
        return self.in_mask(structure) or structure in self.extras

    def flat_mask(self) -> np.ndarray:
        if self.task == PARSING:
            return arcs_to_flat(self.mask & arc_support(self.n, len(self.labels)))
        return self.mask.flat()

    def mask_members(self) -> Iterator[Structure]:
        if self.task == PARSING:
            return dep.iter_trees_in_mask(self.mask, self.labels)
        return chain.iter_sequences_in_mask(self.mask, self.labels)

    def members(self) -> Iterator[Structure]:
        """Every structure of the chart: those induced by the mask, then the extras."""
        yield from self.mask_members()
        yield from self.extras

    def __eq__(self, other):
        if not isinstance(other, ChartSpec):
            return NotImplemented
        same_mask = (
            np.array_equal(self.mask, other.mask) if self.task == PARSING else self.mask == other.mask
        )
        return (self.task, self.labels, self.extras) == (other.task, other.labels, other.extras) and same_mask

    # serialisation

    def _candidate_ids(self, p: int, c: int) -> list:
        if self.task == PARSING:
            n_labels = len(self.labels)
            return [c // n_labels, p + 1, self.labels[c % n_labels]]
        if self.n == 1:
            return [1, self.labels[c]]
        t = len(self.labels)
        return [p + 1, self.labels[c // t], self.labels[c % t]]

    def to_dict(self, sent_id: Optional[str] = None) -> dict:
        flat = self.flat_mask()
        allowed = [[self._candidate_ids(p, int(c)) for c in np.flatnonzero(row)] for p, row in enumerate(flat)]
        extras = [
            {"heads": list(e.heads), "labels": list(e.labels)} if isinstance(e, DepTree) else {"tags": list(e.tags)}
            for e in self.extras
        ]
        d = {"task": self.task, "n": self.n, "labels": list(self.labels), "allowed": allowed, "extras": extras}
        if sent_id is not None:
            d["sent_id"] = sent_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChartSpec":
        task, n, labels = d["task"], int(d["n"]), tuple(d["labels"])
        index = {l: k for k, l in enumerate(labels)}
        if task == PARSING:
            mask = np.zeros((n + 1, n + 1, len(labels)), dtype=bool)
            for row in d["allowed"]:
                for h, j, l in row:
                    mask[h, j, index[l]] = True
            extras = tuple(DepTree(tuple(e["heads"]), tuple(e["labels"])) for e in d["extras"])
        else:
            pm = PairMask.empty(n, len(labels))
            for row in d["allowed"]:
                for ids in row:
                    if n == 1:
                        pm.unary[index[ids[1]]] = True
                    else:
                        pm.pairs[ids[0] - 1, index[ids[1]], index[ids[2]]] = True
            mask = pm
            extras = tuple(TagSeq(tuple(e["tags"])) for e in d["extras"])
        return cls(task, labels, mask, extras)

    def dumps(self, sent_id: Optional[str] = None) -> str:
        return json.dumps(self.to_dict(sent_id), separators=(",", ":"))


def chart_from_flat(
    task: str, labels: Sequence[str], n: int, flat: np.ndarray, best: Sequence[Structure] = ()
) -> ChartSpec:
    """Chart for a per-position allowed mask, adding each 1-best structure the mask misses."""
    labels = tuple(labels)
    if task == PARSING:
        mask: Union[np.ndarray, PairMask] = flat_to_arcs(flat, len(labels)).astype(bool)
        mask &= arc_support(n, len(labels))
    else:
        mask = PairMask.from_flat(flat, n, len(labels))
    bare = ChartSpec(task, labels, mask)
    extras: list[Structure] = []
    for y in best:
        if not bare.in_mask(y) and y not in extras:
            extras.append(y)
    return ChartSpec(task, labels, mask, tuple(extras))


def singleton_chart(structure: Structure, labels: Sequence[str]) -> ChartSpec:
    """Chart whose only member is ``structure`` (mask-induced)."""
    labels = tuple(labels)
    if isinstance(structure, DepTree):
        return ChartSpec(PARSING, labels, tree_to_mask(structure, labels))
    return ChartSpec(TAGGING, labels, chain.sequence_to_mask(structure, labels))


# threshold selection and pooling


def threshold_select(probs: np.ndarray, sigma: float, support: Optional[np.ndarray] = None) -> np.ndarray:
    """Smallest prefix, by descending probability, whose cumulative mass reaches ``sigma``.

    Ties keep candidate index order. At least one candidate is always selected;
    zero-probability candidates are never added after the first.
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must be in [0, 1], got {sigma}")
    probs = np.asarray(probs, dtype=np.float64)
    candidates = np.arange(len(probs)) if support is None else np.flatnonzero(support)
    order = candidates[np.argsort(-probs[candidates], kind="stable")]
    picked = [order[0]]
    total = probs[order[0]]
    for c in order[1:]:
        if total >= sigma - _MASS_TOL or probs[c] <= 0.0:
            break
        picked.append(c)
        total += probs[c]
    return np.array(picked, dtype=np.int64)


def select_mask(dist: SubstructureDist, sigma: float) -> np.ndarray:
    """Per-position boolean mask of the thresholded candidates."""
    out = np.zeros(dist.probs.shape, dtype=bool)
    for p in range(dist.n_positions):
        out[p, threshold_select(dist.probs[p], sigma, dist.support[p])] = True
    return out


def _check_alphas(alphas, k: int) -> np.ndarray:
    if alphas is None:
        return np.full(k, 1.0 / k)
    a = np.asarray(alphas, dtype=np.float64)
    if a.shape != (k,) or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
        raise ValueError(f"alphas must be {k} non-negative weights summing to 1, got {a}")
    return a


def _pool_logits(log_probs: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    # weights of exactly zero must not contribute, even against a -inf log-probability
    return np.tensordot(alphas, log_probs, axes=1)


def lop_pool(dists: Sequence[SubstructureDist], alphas=None) -> SubstructureDist:
    """Logarithmic opinion pool: per position, ``p(c) ∝ prod_k p_k(c) ** alpha_k``."""
    if not dists:
        raise ValueError("need at least one distribution")
    alphas = _check_alphas(alphas, len(dists))
    support = dists[0].support
    for d in dists[1:]:
        if d.probs.shape != dists[0].probs.shape or not np.array_equal(d.support, support):
            raise ValueError("distributions must share one support")
    log_probs = np.log(np.maximum(np.stack([d.probs for d in dists]), PROB_FLOOR))
    logits = np.where(support, _pool_logits(log_probs, alphas), -np.inf)
    pooled = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return SubstructureDist(probs=pooled, support=support.copy())


def pptx_mask(dists: Sequence[SubstructureDist], sigma: float) -> np.ndarray:
    union = np.zeros(dists[0].probs.shape, dtype=bool)
    for d in dists:
        union |= select_mask(d, sigma)
    return union


def lop_mask(dists: Sequence[SubstructureDist], sigma: float, alphas=None) -> np.ndarray:
    return select_mask(lop_pool(dists, alphas), sigma)


# ensembles


@dataclasses.dataclass
class EnsembleSpec:
    """Source models over one shared label inventory, with pool weights."""

    sources: tuple[ScoringModel, ...]
    alphas: Optional[np.ndarray] = None

    def __post_init__(self):
        self.sources = tuple(self.sources)
        if not self.sources:
            raise ValueError("an ensemble needs at least one source")
        tasks = {m.task for m in self.sources}
        if len(tasks) != 1:
            raise ValueError(f"sources disagree on the task: {sorted(tasks)}")
        inventories = {m.labels for m in self.sources}
        if len(inventories) > 1:
            union = tuple(sorted(set().union(*inventories)))
            self.sources = tuple(m if m.labels == union else m.with_labels(union) for m in self.sources)
        self.alphas = _check_alphas(self.alphas, len(self.sources))

    @property
    def task(self) -> str:
        return self.sources[0].task

    @property
    def labels(self) -> tuple[str, ...]:
        return self.sources[0].labels

    def with_alphas(self, alphas) -> "EnsembleSpec":
        """Same sources with new weights; ``None`` means uniform."""
        return EnsembleSpec(self.sources, None if alphas is None else np.asarray(alphas, dtype=np.float64))

    def outputs(self, sentence: Sentence) -> tuple[list[SubstructureDist], list[Structure]]:
        """Each source's marginals and 1-best structure for a sentence."""
        dists, best = [], []
        for m in self.sources:
            scores = m.score(sentence)
            if self.task == PARSING:
                dists.append(dep.arc_marginals(scores))
                best.append(dep.mst_decode(scores))
            else:
                dists.append(chain.pair_marginals(scores))
                best.append(chain.viterbi_decode(scores))
        return dists, best


def pptx_chart(ensemble: EnsembleSpec, sentence: Sentence, sigma: float = DEFAULT_SIGMA) -> ChartSpec:
    dists, best = ensemble.outputs(sentence)
    return chart_from_flat(ensemble.task, ensemble.labels, len(sentence), pptx_mask(dists, sigma), best)


def lop_chart(ensemble: EnsembleSpec, sentence: Sentence, sigma: float = DEFAULT_SIGMA) -> ChartSpec:
    dists, best = ensemble.outputs(sentence)
    mask = lop_mask(dists, sigma, ensemble.alphas)
    return chart_from_flat(ensemble.task, ensemble.labels, len(sentence), mask, best)


def mv_predict(ensemble: EnsembleSpec, sentence: Sentence) -> Structure:
    """Majority vote over the sources' 1-best structures."""
    _, best = ensemble.outputs(sentence)
    return majority_vote(best, ensemble.labels)


def majority_vote(best: Sequence[Structure], labels: Sequence[str]) -> Structure:
    labels = tuple(labels)
    if isinstance(best[0], DepTree):
        n = len(best[0])
        index = {l: k for k, l in enumerate(labels)}
        votes = np.zeros((n + 1, n + 1, len(labels)))
        for tree in best:
            for j, (h, l) in enumerate(zip(tree.heads, tree.labels), start=1):
                votes[h, j, index[l]] += 1.0
        return dep.mst_decode(dep.ArcScores(votes, labels))
    tags = []
    for column in zip(*(seq.tags for seq in best)):
        counts: dict[str, int] = {}
        for t in column:
            counts[t] = counts.get(t, 0) + 1
        top = max(counts.values())
        tags.append(min(t for t, c in counts.items() if c == top))
    return TagSeq(tuple(tags))


# learning pool weights


@dataclasses.dataclass(frozen=True)
class _PoolData:
    log_probs: list  # per sentence, (K, P, C) clamped log-probabilities
    support: list  # per sentence, (P, C)
    gold: list  # per sentence, (P,) flat gold candidate index
    n_positions: int


def _pool_data(ensemble: EnsembleSpec, labelled: Corpus) -> _PoolData:
    log_probs, supports, golds = [], [], []
    n_positions = 0
    for sent in labelled:
        dists, _ = ensemble.outputs(sent)
        log_probs.append(np.log(np.maximum(np.stack([d.probs for d in dists]), PROB_FLOOR)))
        supports.append(dists[0].support)
        gold = gold_flat_indices(gold_structure(sent, ensemble.task), ensemble.labels)
        golds.append(gold)
        n_positions += len(gold)
    return _PoolData(log_probs, supports, golds, n_positions)


def _kl_and_grad(data: _PoolData, alphas: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log pooled probability of the gold substructures, and its gradient in alpha."""
    total = 0.0
    grad = np.zeros_like(alphas)
    for lp, support, gold in zip(data.log_probs, data.support, data.gold):
        logits = np.where(support, _pool_logits(lp, alphas), -np.inf)
        log_norm = logsumexp(logits, axis=1)
        rows = np.arange(len(gold))
        total += float(np.sum(log_norm - logits[rows, gold]))
        pooled = np.exp(logits - log_norm[:, None])
        expected = np.einsum("pc,kpc->k", pooled, np.where(support, lp, 0.0))
        grad += expected - lp[:, rows, gold].sum(axis=1)
    return total / data.n_positions, grad / data.n_positions


def pool_kl_value(ensemble: EnsembleSpec, labelled: Corpus, alphas=None) -> float:
    data = _pool_data(ensemble, labelled)
    return _kl_and_grad(data, _check_alphas(alphas if alphas is not None else ensemble.alphas, len(ensemble.sources)))[0]


@dataclasses.dataclass(frozen=True)
class AlphaFit:
    alphas: np.ndarray
    history: tuple[float, ...]


def learn_alphas(
    ensemble: EnsembleSpec,
    labelled: Corpus,
    lr: float = 0.1,
    decay: float = 0.9,
    max_epochs: int = 100,
    tol: float = 1e-6,
) -> AlphaFit:
    """Fit pool weights by gradient descent on the pool's KL to the gold one-hots.

    Weights are a softmax of free logits, starting uniform. A step that would
    raise the objective is halved until it does not.
    """
    if len(labelled) == 0:
        raise ValueError("need labelled sentences to learn pool weights")
    k = len(ensemble.sources)
    data = _pool_data(ensemble, labelled)
    logits = np.zeros(k)
    alphas = softmax(logits)
    value, grad_a = _kl_and_grad(data, alphas)
    history = [value]
    for epoch in range(max_epochs):
        grad = alphas * (grad_a - alphas @ grad_a)
        step = lr * decay**epoch
        for _ in range(30):
            cand_logits = logits - step * grad
            cand_alphas = softmax(cand_logits)
            cand_value, cand_grad = _kl_and_grad(data, cand_alphas)
            if cand_value <= value:
                break
            step /= 2.0
        else:
            break
        change = abs(value - cand_value) / max(abs(value), 1e-300)
        logits, alphas, value, grad_a = cand_logits, cand_alphas, cand_value, cand_grad
        history.append(value)
        logger.debug("alpha epoch %d: kl=%.6g alphas=%s", epoch, value, alphas)
        if change < tol:
            break
    return AlphaFit(alphas, tuple(history))
