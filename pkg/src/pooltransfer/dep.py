"""Exact inference over single-root, possibly non-projective dependency trees.

Scores are arc-factored log-potentials ``scores[head, dependent, label]`` on an
``(n+1, n+1, L)`` array whose row/column 0 is the virtual root. Entries with
``dependent == 0`` or ``head == dependent`` are ignored.

Partition functions use the single-root variant of the matrix-tree theorem
(Koo et al., 2007) on label-aggregated weights, with each dependent's column
scaled by its maximum so that the determinant is taken on entries <= 1.
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import Iterator, Optional, Sequence

import numpy as np


from .structures import DepTree, SubstructureDist, arc_support, arcs_to_flat, logsumexp

NO_TREE = -np.inf
"""Log-partition returned when a mask admits no tree."""

MAX_PARSE_LENGTH = 30
MAX_ENUMERATE_LENGTH = 6


class NumericalDegeneracyError(ArithmeticError):
    pass


@dataclasses.dataclass(frozen=True)
class ArcScores:
    scores: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        s = self.scores
        if s.ndim != 3 or s.shape[0] != s.shape[1] or s.shape[2] != len(self.labels):
            raise ValueError(f"arc scores of shape {s.shape} do not match {len(self.labels)} labels")
        if s.shape[0] < 2:
            raise ValueError("need at least one token")
        if not np.all(np.isfinite(s[arc_support(self.n, len(self.labels))])):
            raise ValueError("arc scores must be finite")

    @property
    def n(self) -> int:
        return self.scores.shape[0] - 1

    def full_mask(self) -> np.ndarray:
        return arc_support(self.n, len(self.labels))


def _allowed(scores: ArcScores, mask: Optional[np.ndarray]) -> np.ndarray:
    valid = arc_support(scores.n, len(scores.labels))
    if mask is None:
        return valid
    if mask.shape != valid.shape:
        raise ValueError(f"mask of shape {mask.shape} does not match scores {valid.shape}")
    return valid & mask


def tree_exists(pair_allowed: np.ndarray) -> bool:
    """Whether some single-root tree uses only allowed ``(head, dependent)`` pairs."""
    n = pair_allowed.shape[0] - 1
    roots = pair_allowed[0, 1:]
    if not roots.any():
        return False
    # reach[a, b]: b is reachable from a through allowed token-token arcs
    reach = pair_allowed[1:, 1:] | np.eye(n, dtype=bool)
    for _ in range(max(1, int(np.ceil(np.log2(max(n, 2)))))):
        step = (reach.astype(np.int32) @ reach.astype(np.int32)) > 0
        if np.array_equal(step, reach):
            break
        reach = step
    return bool((roots & reach.all(axis=1)).any())


def _scaled_laplacian(log_w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-root Laplacian of ``exp(log_w)`` with per-dependent column scaling.

    Returns ``(laplacian, weights, column_shift)`` where ``weights`` are the
    scaled pair weights and ``column_shift[j - 1]`` the log scale of column ``j``.
    """
    shift = log_w[:, 1:].max(axis=0)
    w = np.zeros_like(log_w)
    w[:, 1:] = np.exp(log_w[:, 1:] - shift)
    inner = w[1:, 1:]
    lap = -inner.copy()
    np.fill_diagonal(lap, inner.sum(axis=0))
    lap[0, :] = w[0, 1:]
    return lap, w, shift


def _pair_log_weights(scores: ArcScores, allowed: np.ndarray) -> np.ndarray:
    masked = np.where(allowed, scores.scores, -np.inf)
    with np.errstate(divide="ignore"):
        return logsumexp(masked, axis=2)


def _log_det_or_raise(lap: np.ndarray) -> float:
    sign, logabs = np.linalg.slogdet(lap)
    if sign <= 0:
        raise NumericalDegeneracyError(
            f"non-positive Laplacian minor (sign {sign:+.0f}, log|det| {logabs:.3g})"
        )
    return float(logabs)


def dep_log_partition(scores: ArcScores, mask: Optional[np.ndarray] = None) -> float:
    """Log of the summed potential of all single-root trees whose arcs are allowed by ``mask``."""
    allowed = _allowed(scores, mask)
    if not tree_exists(allowed.any(axis=2)):
        return NO_TREE
    lap, _, shift = _scaled_laplacian(_pair_log_weights(scores, allowed))
    return float(shift.sum()) + _log_det_or_raise(lap)


def dep_partition_and_marginals(
    scores: ArcScores, mask: Optional[np.ndarray] = None
) -> tuple[float, Optional[np.ndarray]]:
    """``(log_partition, marginals)`` in one pass; marginals are ``None`` when no tree exists."""
    allowed = _allowed(scores, mask)
    if not tree_exists(allowed.any(axis=2)):
        return NO_TREE, None
    log_w = _pair_log_weights(scores, allowed)
    lap, w, shift = _scaled_laplacian(log_w)
    log_z = float(shift.sum()) + _log_det_or_raise(lap)
    inv = np.linalg.inv(lap)
    n = scores.n
    pair = np.zeros((n + 1, n + 1))
    # single-root case of Koo et al. (2007); inv is indexed by tokens 1..n
    pair[0, 1:] = w[0, 1:] * inv[:, 0]
    diag = np.diag(inv)
    a = w[1:, 1:]
    term1 = a * diag[None, :]
    term1[:, 0] = 0.0
    term2 = a * inv.T
    term2[0, :] = 0.0
    pair[1:, 1:] = term1 - term2
    np.fill_diagonal(pair, 0.0)
    pair[:, 1:] = np.clip(pair[:, 1:], 0.0, None)
    masked = np.where(allowed, scores.scores, -np.inf)
    with np.errstate(invalid="ignore"):
        within = np.exp(masked - log_w[:, :, None])
    within = np.nan_to_num(within, nan=0.0)
    return log_z, pair[:, :, None] * within


def arc_marginal_array(scores: ArcScores, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Marginal probability of every ``(head, dependent, label)`` under the (masked) tree distribution."""
    _, marg = dep_partition_and_marginals(scores, mask)
    if marg is None:
        raise ValueError("mask admits no tree")
    return marg


def arc_marginals(scores: ArcScores, mask: Optional[np.ndarray] = None) -> SubstructureDist:
    """Per-dependent distributions over incoming arcs."""
    marg = arc_marginal_array(scores, mask)
    support = arc_support(scores.n, len(scores.labels))
    return SubstructureDist(probs=arcs_to_flat(marg), support=arcs_to_flat(support))


def log_count_trees(mask: np.ndarray) -> float:
    n_labels = mask.shape[2]
    zero = ArcScores(np.zeros(mask.shape), tuple(str(k) for k in range(n_labels)))
    return dep_log_partition(zero, mask)


def count_trees(mask: np.ndarray) -> float:
    """Number of single-root trees with every arc allowed by ``mask``."""
    log_count = log_count_trees(mask)
    if log_count == NO_TREE:
        return 0.0
    count = float(np.exp(log_count))
    return float(np.rint(count)) if count < 2.0**53 else count


def _find_cycle(heads: np.ndarray) -> Optional[list[int]]:
    n_nodes = len(heads)
    state = np.zeros(n_nodes, dtype=np.int8)  # 0 unvisited, 1 on current path, 2 done
    state[0] = 2
    for start in range(1, n_nodes):
        path = []
        v = start
        while state[v] == 0:
            state[v] = 1
            path.append(v)
            v = heads[v]
        if state[v] == 1:
            return path[path.index(v):]
        for u in path:
            state[u] = 2
    return None


def _chu_liu_edmonds(s: np.ndarray) -> np.ndarray:
    """Maximum spanning arborescence rooted at 0 of ``s[head, dependent]``."""
    n_nodes = s.shape[0]
    heads = np.argmax(s, axis=0)
    heads[0] = 0
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    in_cycle = np.zeros(n_nodes, dtype=bool)
    in_cycle[cycle] = True
    rest = [v for v in range(n_nodes) if not in_cycle[v]]
    cyc = np.array(cycle)
    m = len(rest)
    sub = np.full((m + 1, m + 1), -np.inf)
    sub[:m, :m] = s[np.ix_(rest, rest)]
    kept = s[heads[cyc], cyc]
    enter = np.zeros(m, dtype=int)
    leave = np.zeros(m, dtype=int)
    for a_idx, a in enumerate(rest):
        gain = s[a, cyc] - kept
        k = int(np.argmax(gain))
        sub[a_idx, m] = gain[k]
        enter[a_idx] = cyc[k]
    for b_idx, b in enumerate(rest):
        out = s[cyc, b]
        k = int(np.argmax(out))
        sub[m, b_idx] = out[k]
        leave[b_idx] = cyc[k]
    sub[:, 0] = -np.inf
    np.fill_diagonal(sub, -np.inf)
    sub_heads = _chu_liu_edmonds(sub)
    new_heads = heads.copy()
    for b_idx in range(1, m):
        hb = sub_heads[b_idx]
        new_heads[rest[b_idx]] = leave[b_idx] if hb == m else rest[hb]
    a_idx = sub_heads[m]
    new_heads[enter[a_idx]] = rest[a_idx]
    return new_heads


def mst_decode(scores: ArcScores) -> DepTree:
    """Highest-scoring single-root tree (Chu-Liu/Edmonds, best label per pair first)."""
    n = scores.n
    valid = arc_support(n, len(scores.labels))
    s = np.where(valid, scores.scores, -np.inf)
    best_label = np.argmax(s, axis=2)
    pair = np.take_along_axis(s, best_label[:, :, None], axis=2)[:, :, 0]
    best_heads, best_total = None, -np.inf
    for r in range(1, n + 1):
        restricted = pair.copy()
        restricted[0, :] = -np.inf
        restricted[0, r] = pair[0, r]
        heads = _chu_liu_edmonds(restricted)
        total = 0.0
        for j in range(1, n + 1):
            total += pair[heads[j], j]
        if total > best_total:
            best_heads, best_total = heads, total
    labels = tuple(scores.labels[best_label[best_heads[j], j]] for j in range(1, n + 1))
    return DepTree(tuple(int(h) for h in best_heads[1:]), labels)


def _skeletons(n: int) -> Iterator[tuple[int, ...]]:
    for heads in itertools.product(range(n + 1), repeat=n):
        if DepTree(heads, ("",) * n).is_valid():
            yield heads


def enumerate_trees(n: int, labels: Sequence[str], max_trees: int = 5_000_000) -> list[DepTree]:
    """All single-root labelled trees over ``n`` tokens, in (heads, labels) lexicographic order."""
    if n > MAX_ENUMERATE_LENGTH:
        raise ValueError(f"refusing to enumerate trees for n={n} > {MAX_ENUMERATE_LENGTH}")
    if n < 1:
        raise ValueError("n must be positive")
    skeletons = list(_skeletons(n))
    if len(skeletons) * len(labels) ** n > max_trees:
        raise ValueError(f"refusing to enumerate {len(skeletons) * len(labels) ** n} trees")
    return [
        DepTree(heads, lab)
        for heads in skeletons
        for lab in itertools.product(labels, repeat=n)
    ]


def iter_trees_in_mask(mask: np.ndarray, labels: Sequence[str]) -> Iterator[DepTree]:
    """All single-root trees whose arcs are allowed by ``mask``, by backtracking over heads."""
    n = mask.shape[0] - 1
    allowed = mask & arc_support(n, mask.shape[2])
    pair = allowed.any(axis=2)
    heads = [0] * (n + 1)
    assigned = [False] * (n + 1)

    def closes_cycle(j: int) -> bool:
        v = heads[j]
        while v != 0 and assigned[v]:
            if v == j:
                return True
            v = heads[v]
        return False

    def rec(j: int, n_roots: int) -> Iterator[tuple[int, ...]]:
        if j > n:
            if n_roots == 1:
                yield tuple(heads[1:])
            return
        for h in np.flatnonzero(pair[:, j]):
            h = int(h)
            if h == 0 and n_roots == 1:
                continue
            heads[j], assigned[j] = h, True
            if not closes_cycle(j):
                yield from rec(j + 1, n_roots + (h == 0))
            assigned[j] = False

    for skeleton in rec(1, 0):
        options = [
            [labels[k] for k in np.flatnonzero(allowed[h, j])] for j, h in enumerate(skeleton, start=1)
        ]
        for lab in itertools.product(*options):
            yield DepTree(skeleton, lab)
