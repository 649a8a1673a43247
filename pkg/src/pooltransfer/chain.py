"""Exact inference for linear-chain tag sequences.

A sequence ``y`` scores ``sum_j emit[j, y_j] + sum_j trans[y_j, y_{j+1}]``.
Masks restrict the tag pair used at each position ``j = 1..n-1``; for a
length-1 sentence the mask is over unary tags instead.
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import Iterator, Optional, Sequence

import numpy as np


from .structures import SubstructureDist, TagSeq, logsumexp

NO_SEQUENCE = -np.inf
MAX_TAG_LENGTH = 60
MAX_ENUMERATE_SEQUENCES = 100_000


@dataclasses.dataclass(frozen=True)
class ChainScores:
    emit: np.ndarray
    trans: np.ndarray
    tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        t = len(self.tags)
        if self.emit.ndim != 2 or self.emit.shape[1] != t or self.emit.shape[0] < 1:
            raise ValueError(f"emission scores of shape {self.emit.shape} do not match {t} tags")
        if self.trans.shape != (t, t):
            raise ValueError(f"transition scores of shape {self.trans.shape} do not match {t} tags")
        if not (np.all(np.isfinite(self.emit)) and np.all(np.isfinite(self.trans))):
            raise ValueError("chain scores must be finite")

    @property
    def n(self) -> int:
        return self.emit.shape[0]


@dataclasses.dataclass(frozen=True)
class PairMask:
    """``pairs[j - 1, t, t']`` allows tag pair ``(t, t')`` at positions ``(j, j+1)``.

    ``unary`` is only consulted for length-1 sentences.
    """

    pairs: np.ndarray
    unary: np.ndarray

    @property
    def n(self) -> int:
        return self.pairs.shape[0] + 1

    @property
    def n_tags(self) -> int:
        return self.unary.shape[0]

    @classmethod
    def full(cls, n: int, n_tags: int) -> "PairMask":
        return cls(np.ones((n - 1, n_tags, n_tags), dtype=bool), np.ones(n_tags, dtype=bool))

    @classmethod
    def empty(cls, n: int, n_tags: int) -> "PairMask":
        return cls(np.zeros((n - 1, n_tags, n_tags), dtype=bool), np.zeros(n_tags, dtype=bool))

    def flat(self) -> np.ndarray:
        """Per-position allowed candidates, ``(positions, candidates)``."""
        if self.n == 1:
            return self.unary[None, :].copy()
        return self.pairs.reshape(self.n - 1, -1).copy()

    @classmethod
    def from_flat(cls, flat: np.ndarray, n: int, n_tags: int) -> "PairMask":
        if n == 1:
            return cls(np.zeros((0, n_tags, n_tags), dtype=bool), flat.reshape(n_tags).astype(bool))
        return cls(flat.reshape(n - 1, n_tags, n_tags).astype(bool), np.ones(n_tags, dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, PairMask):
            return NotImplemented
        if not np.array_equal(self.pairs, other.pairs):
            return False
        return self.n > 1 or np.array_equal(self.unary, other.unary)


def _check_mask(scores: ChainScores, mask: Optional[PairMask]) -> PairMask:
    if mask is None:
        return PairMask.full(scores.n, len(scores.tags))
    if mask.n != scores.n or mask.n_tags != len(scores.tags):
        raise ValueError("mask does not match chain scores")
    return mask


def _log_mask(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, -np.inf)


def _forward(scores: ChainScores, mask: PairMask) -> np.ndarray:
    n = scores.n
    alpha = np.empty((n, len(scores.tags)))
    alpha[0] = scores.emit[0]
    if n == 1:
        alpha[0] = alpha[0] + _log_mask(mask.unary)
    for j in range(1, n):
        step = alpha[j - 1][:, None] + scores.trans + _log_mask(mask.pairs[j - 1])
        alpha[j] = logsumexp(step, axis=0) + scores.emit[j]
    return alpha


def _backward(scores: ChainScores, mask: PairMask) -> np.ndarray:
    n = scores.n
    beta = np.zeros((n, len(scores.tags)))
    for j in range(n - 2, -1, -1):
        step = scores.trans + _log_mask(mask.pairs[j]) + (scores.emit[j + 1] + beta[j + 1])[None, :]
        beta[j] = logsumexp(step, axis=1)
    return beta


def chain_log_partition(scores: ChainScores, mask: Optional[PairMask] = None) -> float:
    mask = _check_mask(scores, mask)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = _forward(scores, mask)
        return float(logsumexp(alpha[-1]))


def chain_partition_and_marginals(
    scores: ChainScores, mask: Optional[PairMask] = None
) -> tuple[float, Optional[np.ndarray]]:
    """``(log_partition, pair_marginals)``; marginals are ``None`` when no sequence is allowed."""
    mask = _check_mask(scores, mask)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = _forward(scores, mask)
        log_z = float(logsumexp(alpha[-1]))
        if log_z == NO_SEQUENCE:
            return log_z, None
        if scores.n == 1:
            return log_z, np.exp(alpha[0] - log_z)
        beta = _backward(scores, mask)
        logits = (
            alpha[:-1, :, None]
            + scores.trans[None]
            + _log_mask(mask.pairs)
            + (scores.emit[1:] + beta[1:])[:, None, :]
        )
        return log_z, np.exp(logits - log_z)


def pair_marginal_array(scores: ChainScores, mask: Optional[PairMask] = None) -> np.ndarray:
    """Pair marginals ``(n-1, T, T)``, or unary marginals ``(T,)`` when ``n == 1``."""
    _, marg = chain_partition_and_marginals(scores, mask)
    if marg is None:
        raise ValueError("mask admits no sequence")
    return marg


def pair_marginals(scores: ChainScores, mask: Optional[PairMask] = None) -> SubstructureDist:
    marg = pair_marginal_array(scores, mask)
    flat = marg[None, :] if scores.n == 1 else marg.reshape(scores.n - 1, -1)
    return SubstructureDist(probs=flat, support=np.ones(flat.shape, dtype=bool))


def unary_marginal_array(scores: ChainScores, mask: Optional[PairMask] = None) -> np.ndarray:
    """Per-token tag marginals ``(n, T)``."""
    marg = pair_marginal_array(scores, mask)
    if scores.n == 1:
        return marg[None, :]
    return unary_from_pairs(marg)


def unary_from_pairs(marg: np.ndarray) -> np.ndarray:
    return np.concatenate([marg.sum(axis=2), marg[-1].sum(axis=0)[None]], axis=0)


def count_sequences(mask: PairMask) -> float:
    """Number of tag sequences all of whose pairs are allowed."""
    if mask.n == 1:
        return float(mask.unary.sum())
    counts = np.ones(mask.n_tags)
    for j in range(mask.n - 1):
        counts = counts @ mask.pairs[j].astype(float)
    return float(counts.sum())


def sequence_score(scores: ChainScores, seq: TagSeq) -> float:
    index = {t: k for k, t in enumerate(scores.tags)}
    y = [index[t] for t in seq.tags]
    total = 0.0
    for j, t in enumerate(y):
        total += scores.emit[j, t]
    for a, b in zip(y, y[1:]):
        total += scores.trans[a, b]
    return float(total)


def viterbi_decode(scores: ChainScores) -> TagSeq:
    """Best sequence; among tied optima the lexicographically smallest (by tag index)."""
    n = scores.n
    # best[j, t]: best score of the suffix starting at position j with tag t
    best = np.zeros((n, len(scores.tags)))
    best[-1] = scores.emit[-1]
    for j in range(n - 2, -1, -1):
        best[j] = scores.emit[j] + (scores.trans + best[j + 1][None, :]).max(axis=1)
    y = [int(np.argmax(best[0]))]
    for j in range(1, n):
        cont = scores.trans[y[-1]] + best[j]
        y.append(int(np.argmax(cont)))
    return TagSeq(tuple(scores.tags[t] for t in y))


def enumerate_sequences(n: int, tags: Sequence[str]) -> list[TagSeq]:
    if n < 1:
        raise ValueError("n must be positive")
    if len(tags) ** n > MAX_ENUMERATE_SEQUENCES:
        raise ValueError(f"refusing to enumerate {len(tags)}^{n} sequences")
    return [TagSeq(seq) for seq in itertools.product(tags, repeat=n)]


def sequence_in_mask(seq: TagSeq, mask: PairMask, tags: Sequence[str]) -> bool:
    index = {t: k for k, t in enumerate(tags)}
    y = [index[t] for t in seq.tags]
    if len(y) == 1:
        return bool(mask.unary[y[0]])
    return all(mask.pairs[j, a, b] for j, (a, b) in enumerate(zip(y, y[1:])))


def sequence_to_mask(seq: TagSeq, tags: Sequence[str]) -> PairMask:
    index = {t: k for k, t in enumerate(tags)}
    y = [index[t] for t in seq.tags]
    mask = PairMask.empty(len(y), len(tags))
    if len(y) == 1:
        mask.unary[y[0]] = True
    for j, (a, b) in enumerate(zip(y, y[1:])):
        mask.pairs[j, a, b] = True
    return mask


def iter_sequences_in_mask(mask: PairMask, tags: Sequence[str]) -> Iterator[TagSeq]:
    if mask.n == 1:
        for t in np.flatnonzero(mask.unary):
            yield TagSeq((tags[t],))
        return
    n = mask.n
    # prune prefixes that cannot be completed
    alive = np.ones((n, mask.n_tags), dtype=bool)
    for j in range(n - 2, -1, -1):
        alive[j] = (mask.pairs[j] & alive[j + 1][None, :]).any(axis=1)

    def rec(prefix: list[int]) -> Iterator[list[int]]:
        j = len(prefix)
        if j == n:
            yield prefix
            return
        options = np.flatnonzero(alive[0]) if j == 0 else np.flatnonzero(mask.pairs[j - 1, prefix[-1]] & alive[j])
        for t in options:
            yield from rec(prefix + [int(t)])

    for y in rec([]):
        yield TagSeq(tuple(tags[t] for t in y))
