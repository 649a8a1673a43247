"""Structures, their substructures, and per-position substructure distributions.

A structure is either a dependency tree or a tag sequence. Both decompose into
substructures grouped by position so that every valid structure contains
exactly one substructure per position:

* parsing: position ``j`` (dependent ``j = 1..n``) holds the arcs ``(i, j, l)``
  with ``i in 0..n, i != j``; flat index ``i * L + l``.
* tagging: position ``j = 1..n-1`` holds the tag pairs ``(j, t, t')``; flat
  index ``t * T + t'``. A length-1 sentence has a single position holding the
  unary tags; flat index ``t``.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence, Union

import numpy as np

PARSING = "parsing"
TAGGING = "tagging"
TASKS = (PARSING, TAGGING)


@dataclasses.dataclass(frozen=True)
class DepTree:
    """Head and label of every dependent ``1..n`` (``heads[j - 1]`` is the head of ``j``)."""

    heads: tuple[int, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self) -> int:
        return len(self.heads)

    def arcs(self) -> set[tuple[int, int, str]]:
        return {(h, j, l) for j, (h, l) in enumerate(zip(self.heads, self.labels), start=1)}

    def is_valid(self) -> bool:
        n = len(self.heads)
        heads = (0,) + self.heads
        if sum(1 for h in self.heads if h == 0) != 1:
            return False
        for j in range(1, n + 1):
            if not 0 <= heads[j] <= n or heads[j] == j:
                return False
        for start in range(1, n + 1):
            node, steps = start, 0
            while node != 0:
                node = heads[node]
                steps += 1
                if steps > n:
                    return False
        return True


@dataclasses.dataclass(frozen=True)
class TagSeq:
    tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))

    def __len__(self) -> int:
        return len(self.tags)

    def pairs(self) -> set[tuple]:
        if len(self.tags) == 1:
            return {(1, self.tags[0])}
        return {(j, a, b) for j, (a, b) in enumerate(zip(self.tags, self.tags[1:]), start=1)}


Structure = Union[DepTree, TagSeq]


def substructures(structure: Structure) -> set[tuple]:
    """``A(y)``: the set of substructures in a structure."""
    if isinstance(structure, DepTree):
        return structure.arcs()
    return structure.pairs()


@dataclasses.dataclass(frozen=True)
class SubstructureDist:
    """Per-position distributions over competing substructures.

    ``probs`` has shape ``(positions, candidates)``; ``support[p, c]`` marks
    candidates that exist at position ``p`` (self-loop arcs do not).
    """

    probs: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        if self.probs.shape != self.support.shape or self.probs.ndim != 2:
            raise ValueError("probs and support must be 2-d arrays of equal shape")

    @property
    def n_positions(self) -> int:
        return self.probs.shape[0]


def arc_support(n: int, n_labels: int) -> np.ndarray:
    """Valid ``(head, dependent, label)`` triples as an ``(n+1, n+1, L)`` boolean array."""
    valid = np.ones((n + 1, n + 1, n_labels), dtype=bool)
    valid[:, 0, :] = False
    idx = np.arange(n + 1)
    valid[idx, idx, :] = False
    return valid


def arcs_to_flat(arr: np.ndarray) -> np.ndarray:
    """``(n+1, n+1, L)`` head-dependent-label array to ``(n, (n+1) * L)`` per-dependent rows."""
    n1, _, n_labels = arr.shape
    return np.ascontiguousarray(arr[:, 1:, :].transpose(1, 0, 2)).reshape(n1 - 1, n1 * n_labels)


def flat_to_arcs(flat: np.ndarray, n_labels: int) -> np.ndarray:
    n = flat.shape[0]
    out = np.zeros((n + 1, n + 1, n_labels), dtype=flat.dtype)
    out[:, 1:, :] = flat.reshape(n, n + 1, n_labels).transpose(1, 0, 2)
    return out


def tree_to_mask(tree: DepTree, labels: Sequence[str]) -> np.ndarray:
    n = len(tree)
    mask = np.zeros((n + 1, n + 1, len(labels)), dtype=bool)
    index = {l: k for k, l in enumerate(labels)}
    for j, (h, l) in enumerate(zip(tree.heads, tree.labels), start=1):
        mask[h, j, index[l]] = True
    return mask


def tree_score(scores: np.ndarray, tree: DepTree, labels: Sequence[str]) -> float:
    """Total score of a tree, summed in dependent order."""
    index = {l: k for k, l in enumerate(labels)}
    total = 0.0
    for j, (h, l) in enumerate(zip(tree.heads, tree.labels), start=1):
        total += scores[h, j, index[l]]
    return float(total)


def tree_in_mask(tree: DepTree, mask: np.ndarray, labels: Sequence[str]) -> bool:
    index = {l: k for k, l in enumerate(labels)}
    return all(mask[h, j, index[l]] for j, (h, l) in enumerate(zip(tree.heads, tree.labels), start=1))


def logsumexp(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Log-sum-exp that tolerates all ``-inf`` slices (result ``-inf``).

    Same results as ``scipy.special.logsumexp`` at a fraction of its per-call
    overhead, which dominates in the forward-backward inner loop.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out
