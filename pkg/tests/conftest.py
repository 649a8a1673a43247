"""Shared fixtures: brute-force oracles written independently of the library,
random instance builders, and the acceptance-criteria reporter."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from pooltransfer.chain import ChainScores, PairMask
from pooltransfer.conllu import Sentence, Token
from pooltransfer.dep import ArcScores

# oracle: dependency trees


def _is_single_root_tree(heads) -> bool:
    n = len(heads)
    if sum(h == 0 for h in heads) != 1:
        return False
    for j in range(1, n + 1):
        seen = set()
        v = j
        while v != 0:
            if v in seen or heads[v - 1] == v:
                return False
            seen.add(v)
            v = heads[v - 1]
    return True


def oracle_trees(n: int, n_labels: int):
    """Every single-root labelled tree as ``(heads, label_indices)``."""
    out = []
    for heads in itertools.product(range(n + 1), repeat=n):
        if any(h == j for j, h in enumerate(heads, start=1)):
            continue
        if not _is_single_root_tree(heads):
            continue
        for labs in itertools.product(range(n_labels), repeat=n):
            out.append((heads, labs))
    return out


def oracle_tree_table(scores: np.ndarray, mask=None):
    """Log-score of every tree allowed by ``mask``."""
    n = scores.shape[0] - 1
    rows = []
    for heads, labs in oracle_trees(n, scores.shape[2]):
        arcs = [(h, j, l) for j, (h, l) in enumerate(zip(heads, labs), start=1)]
        if mask is not None and not all(mask[a] for a in arcs):
            continue
        rows.append((heads, labs, math.fsum(scores[a] for a in arcs)))
    return rows


def oracle_logsumexp(values) -> float:
    values = list(values)
    if not values:
        return -math.inf
    m = max(values)
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def oracle_arc_marginals(scores: np.ndarray, mask=None) -> np.ndarray:
    rows = oracle_tree_table(scores, mask)
    log_z = oracle_logsumexp(r[2] for r in rows)
    marg = np.zeros(scores.shape)
    for heads, labs, s in rows:
        w = math.exp(s - log_z)
        for j, (h, l) in enumerate(zip(heads, labs), start=1):
            marg[h, j, l] += w
    return marg


# oracle: tag sequences


def oracle_sequence_table(emit: np.ndarray, trans: np.ndarray, pairs=None, unary=None):
    n, t = emit.shape
    rows = []
    for y in itertools.product(range(t), repeat=n):
        if n == 1 and unary is not None and not unary[y[0]]:
            continue
        if pairs is not None and n > 1 and not all(pairs[j, y[j], y[j + 1]] for j in range(n - 1)):
            continue
        s = math.fsum([emit[j, y[j]] for j in range(n)] + [trans[y[j], y[j + 1]] for j in range(n - 1)])
        rows.append((y, s))
    return rows


def oracle_pair_marginals(emit, trans, pairs=None, unary=None) -> np.ndarray:
    n, t = emit.shape
    rows = oracle_sequence_table(emit, trans, pairs, unary)
    log_z = oracle_logsumexp(r[1] for r in rows)
    if n == 1:
        out = np.zeros(t)
        for y, s in rows:
            out[y[0]] += math.exp(s - log_z)
        return out
    out = np.zeros((n - 1, t, t))
    for y, s in rows:
        w = math.exp(s - log_z)
        for j in range(n - 1):
            out[j, y[j], y[j + 1]] += w
    return out


# random instances


def labels_of(k: int) -> tuple[str, ...]:
    return tuple(f"l{i}" for i in range(k))


def random_arc_scores(rng, n: int, n_labels: int, scale: float = 2.0) -> ArcScores:
    return ArcScores(rng.normal(scale=scale, size=(n + 1, n + 1, n_labels)), labels_of(n_labels))


def random_arc_mask(rng, n: int, n_labels: int, keep: float = 0.6) -> np.ndarray:
    return rng.random((n + 1, n + 1, n_labels)) < keep


def random_chain_scores(rng, n: int, n_tags: int, scale: float = 2.0) -> ChainScores:
    return ChainScores(rng.normal(scale=scale, size=(n, n_tags)), rng.normal(scale=scale, size=(n_tags, n_tags)), labels_of(n_tags))


def random_pair_mask(rng, n: int, n_tags: int, keep: float = 0.6) -> PairMask:
    return PairMask(rng.random((n - 1, n_tags, n_tags)) < keep, rng.random(n_tags) < keep)


FORMS = ("ba", "kilo", "muna", "pe", "sotu", "vaze", "goh", "ju")
POS = ("NOUN", "VERB", "ADJ", "DET")


def random_sentence(rng, n: int, sent_id: str = "s") -> Sentence:
    return Sentence(
        tuple(Token(form=str(rng.choice(FORMS)), upos=str(rng.choice(POS))) for _ in range(n)), sent_id
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance reporting

_RESULTS: dict[int, tuple[bool, str]] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    _RESULTS[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        ok, detail = _RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
