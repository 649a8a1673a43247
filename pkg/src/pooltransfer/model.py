"""Log-linear scoring models with hashed features.

A model maps a sentence to arc scores (parsing) or emission and transition
scores (tagging). Every feature is a template value conjoined with the label
or tag it scores; the pair is hashed into a fixed-size weight vector. Hashes
are keyed BLAKE2b digests mixed with splitmix64, so they are identical across
runs and platforms.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import pathlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import chain, dep
from .conllu import Sentence
from .structures import PARSING, TAGGING, TASKS, DepTree, Structure, SubstructureDist, TagSeq

DEFAULT_HASH_DIM = 2**20
DEFAULT_HASH_SEED = 0

ROOT_FORM = "<root>"
ROOT_POS = "ROOT"

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@functools.lru_cache(maxsize=1 << 18)
def _digest(text: str, seed: int) -> int:
    key = seed.to_bytes(8, "little", signed=False)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=key).digest(), "little")


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _combine(base: np.ndarray, codes: np.ndarray, dim: int) -> np.ndarray:
    """Hash (feature, label) pairs: broadcast ``base[..., None, K]`` against ``codes[L, 1]``."""
    mixed = _splitmix(base[..., None, :] ^ _splitmix(codes)[:, None])
    return (mixed % np.uint64(dim)).astype(np.int64)


def _dist_bucket(d: int) -> str:
    return str(d) if abs(d) <= 4 else ("+far" if d > 0 else "-far")


# Parsing templates: value of a (head, dependent) pair, given forms/tags with the root at index 0.
ArcTemplate = Callable[[list, list, int, int], str]

ARC_TEMPLATES: dict[str, ArcTemplate] = {
    "bias": lambda f, p, h, d: "",
    "hpos": lambda f, p, h, d: p[h],
    "dpos": lambda f, p, h, d: p[d],
    "hpos+dpos": lambda f, p, h, d: f"{p[h]}|{p[d]}",
    "dir": lambda f, p, h, d: "root" if h == 0 else ("R" if h < d else "L"),
    "hpos+dpos+dir": lambda f, p, h, d: f"{p[h]}|{p[d]}|{'root' if h == 0 else ('R' if h < d else 'L')}",
    "hpos+dpos+dist": lambda f, p, h, d: f"{p[h]}|{p[d]}|{'root' if h == 0 else _dist_bucket(d - h)}",
    "dist": lambda f, p, h, d: "root" if h == 0 else _dist_bucket(d - h),
    "hform+dpos": lambda f, p, h, d: f"{f[h]}|{p[d]}",
    "hpos+dform": lambda f, p, h, d: f"{p[h]}|{f[d]}",
    "hform+dform": lambda f, p, h, d: f"{f[h]}|{f[d]}",
    "hpos+dpos+dprev": lambda f, p, h, d: f"{p[h]}|{p[d]}|{p[d - 1] if d > 1 else '<s>'}",
    "hpos+dpos+dnext": lambda f, p, h, d: f"{p[h]}|{p[d]}|{p[d + 1] if d + 1 < len(p) else '</s>'}",
}

DEFAULT_ARC_TEMPLATES = tuple(ARC_TEMPLATES)

# Tagging templates: value of token j (0-based) in a list of forms.
EmitTemplate = Callable[[list, int], str]

EMIT_TEMPLATES: dict[str, EmitTemplate] = {
    "bias": lambda f, j: "",
    "form": lambda f, j: f[j],
    "prefix2": lambda f, j: f[j][:2],
    "suffix2": lambda f, j: f[j][-2:],
    "suffix3": lambda f, j: f[j][-3:],
    "prev_form": lambda f, j: f[j - 1] if j > 0 else "<s>",
    "next_form": lambda f, j: f[j + 1] if j + 1 < len(f) else "</s>",
    "prev_suffix2": lambda f, j: f[j - 1][-2:] if j > 0 else "<s>",
    "next_suffix2": lambda f, j: f[j + 1][-2:] if j + 1 < len(f) else "</s>",
    "first": lambda f, j: str(j == 0),
    "last": lambda f, j: str(j + 1 == len(f)),
}

DEFAULT_EMIT_TEMPLATES = tuple(EMIT_TEMPLATES)


@dataclasses.dataclass(frozen=True)
class ArcFeatures:
    index: np.ndarray  # (n+1, n+1, L, K) weight indices


@dataclasses.dataclass(frozen=True)
class ChainFeatures:
    emit: np.ndarray  # (n, T, K)
    trans: np.ndarray  # (T, T)


Features = Union[ArcFeatures, ChainFeatures]


@dataclasses.dataclass
class ScoringModel:
    task: str
    labels: tuple[str, ...]
    weights: np.ndarray
    templates: tuple[str, ...]
    hash_dim: int = DEFAULT_HASH_DIM
    hash_seed: int = DEFAULT_HASH_SEED

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.labels = tuple(self.labels)
        self.templates = tuple(self.templates)
        if not self.labels:
            raise ValueError("label inventory must be non-empty")
        known = ARC_TEMPLATES if self.task == PARSING else EMIT_TEMPLATES
        for name in self.templates:
            if name not in known:
                raise ValueError(f"unknown {self.task} template {name!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.hash_dim,):
            raise ValueError(f"weight vector must have shape ({self.hash_dim},)")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @classmethod
    def zeros(
        cls,
        task: str,
        labels: Sequence[str],
        templates: Optional[Sequence[str]] = None,
        hash_dim: int = DEFAULT_HASH_DIM,
        hash_seed: int = DEFAULT_HASH_SEED,
    ) -> "ScoringModel":
        if templates is None:
            templates = DEFAULT_ARC_TEMPLATES if task == PARSING else DEFAULT_EMIT_TEMPLATES
        return cls(task, tuple(labels), np.zeros(hash_dim), tuple(templates), hash_dim, hash_seed)

    def with_weights(self, weights: np.ndarray) -> "ScoringModel":
        return dataclasses.replace(self, weights=np.array(weights, dtype=np.float64))

    def with_labels(self, labels: Sequence[str]) -> "ScoringModel":
        """Same weights over another label inventory (features are keyed by label name)."""
        return dataclasses.replace(self, labels=tuple(labels), weights=self.weights.copy())

    # features

    def _label_codes(self, names: Sequence[str]) -> np.ndarray:
        return np.array([_digest(f"label={x}", self.hash_seed) for x in names], dtype=np.uint64)

    def featurize(self, sentence: Sentence) -> Features:
        if self.task == PARSING:
            return self._arc_features(sentence)
        return self._chain_features(sentence)

    def _arc_features(self, sentence: Sentence) -> ArcFeatures:
        n = len(sentence)
        forms = [ROOT_FORM] + sentence.forms
        tags = [ROOT_POS] + [u if u is not None else "_" for u in sentence.upos]
        base = np.zeros((n + 1, n + 1, len(self.templates)), dtype=np.uint64)
        for k, name in enumerate(self.templates):
            fn = ARC_TEMPLATES[name]
            for h in range(n + 1):
                for d in range(1, n + 1):
                    if h != d:
                        base[h, d, k] = _digest(f"{name}={fn(forms, tags, h, d)}", self.hash_seed)
        return ArcFeatures(_combine(base, self._label_codes(self.labels), self.hash_dim))

    def _chain_features(self, sentence: Sentence) -> ChainFeatures:
        forms = sentence.forms
        base = np.zeros((len(forms), len(self.templates)), dtype=np.uint64)
        for k, name in enumerate(self.templates):
            fn = EMIT_TEMPLATES[name]
            for j in range(len(forms)):
                base[j, k] = _digest(f"{name}={fn(forms, j)}", self.hash_seed)
        emit = _combine(base, self._label_codes(self.labels), self.hash_dim)
        pair_names = [f"{a}>{b}" for a in self.labels for b in self.labels]
        trans_base = np.array([_digest("trans", self.hash_seed)], dtype=np.uint64)
        trans = _combine(trans_base, self._label_codes(pair_names), self.hash_dim)
        return ChainFeatures(emit, trans[:, 0].reshape(len(self.labels), len(self.labels)))

    # scoring and inference

    def score_features(self, feats: Features):
        if isinstance(feats, ArcFeatures):
            return dep.ArcScores(self.weights[feats.index].sum(axis=-1), self.labels)
        return chain.ChainScores(self.weights[feats.emit].sum(axis=-1), self.weights[feats.trans], self.labels)

    def score(self, sentence: Sentence):
        return self.score_features(self.featurize(sentence))

    def marginals(self, sentence: Sentence) -> SubstructureDist:
        scores = self.score(sentence)
        if self.task == PARSING:
            return dep.arc_marginals(scores)
        return chain.pair_marginals(scores)

    def decode(self, sentence: Sentence) -> Structure:
        scores = self.score(sentence)
        if self.task == PARSING:
            return dep.mst_decode(scores)
        return chain.viterbi_decode(scores)

    def predict(self, sentence: Sentence) -> Sentence:
        """Sentence annotated with the model's 1-best structure."""
        best = self.decode(sentence)
        if isinstance(best, DepTree):
            return sentence.with_tree(best.heads, best.labels)
        return sentence.with_tags(best.tags)

    # persistence

    def to_dict(self) -> dict:
        nz = np.flatnonzero(self.weights)
        return {
            "task": self.task,
            "labels": list(self.labels),
            "templates": list(self.templates),
            "hash_dim": self.hash_dim,
            "hash_seed": self.hash_seed,
            "weights": [[int(i), float(self.weights[i])] for i in nz],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringModel":
        weights = np.zeros(int(d["hash_dim"]))
        for i, v in d["weights"]:
            weights[int(i)] = float(v)
        return cls(d["task"], tuple(d["labels"]), weights, tuple(d["templates"]), int(d["hash_dim"]), int(d["hash_seed"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path: Union[str, pathlib.Path]) -> None:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, pathlib.Path]) -> "ScoringModel":
        return cls.from_dict(json.loads(pathlib.Path(path).read_text(encoding="utf-8")))


def score_substructures(model: ScoringModel, sentence: Sentence):
    return model.score(sentence)


def gold_structure(sentence: Sentence, task: str) -> Structure:
    if task == PARSING:
        if not sentence.has_tree:
            raise ValueError(f"sentence {sentence.id!r} has no gold tree")
        return DepTree(tuple(sentence.heads), tuple(sentence.deprels))
    if not sentence.has_tags:
        raise ValueError(f"sentence {sentence.id!r} has no gold tags")
    return TagSeq(tuple(sentence.upos))


def gold_flat_indices(structure: Structure, labels: Sequence[str]) -> np.ndarray:
    """Flat candidate index of the structure's substructure at every position."""
    index = {l: k for k, l in enumerate(labels)}
    if isinstance(structure, DepTree):
        n_labels = len(labels)
        return np.array([h * n_labels + index[l] for h, l in zip(structure.heads, structure.labels)])
    y = [index[t] for t in structure.tags]
    if len(y) == 1:
        return np.array(y)
    t = len(labels)
    return np.array([a * t + b for a, b in zip(y, y[1:])])


def inventory(corpus, task: str) -> tuple[str, ...]:
    """Sorted label (parsing) or tag (tagging) inventory observed in a corpus."""
    if task == PARSING:
        found = {r for s in corpus for r in s.deprels if r is not None}
    else:
        found = {u for s in corpus for u in s.upos if u is not None}
    return tuple(sorted(found))
