"""Synthetic languages for desk-scale transfer experiments.

A language is a word-order setting (for each relation, whether the dependent
precedes its head) plus a lexicon mapping word forms to UPOS tags. All
languages draw from one shared pool of forms, so a source model can be applied
to target text directly; what differs is word order (which hurts parsers) and
the tags some forms carry (which hurts taggers).

A benchmark has one target language and several source languages: a *close*
source that differs from the target in little, and *distant* sources from one
family that share their divergences from the target (so their errors agree)
and are trained on less data with stronger regularisation (so they are less
confident). *Noisy* sources come from languages unlike the target in both
respects; trained with heavy regularisation they are close to uniform.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from .conllu import Corpus, Sentence, Token

TAGS = ("ADJ", "ADP", "ADV", "DET", "NOUN", "PRON", "PUNCT", "VERB")
CONTENT_TAGS = ("ADJ", "ADV", "NOUN", "VERB")
RELATIONS = ("advmod", "amod", "case", "det", "nsubj", "obj", "obl")
LABELS = tuple(sorted(RELATIONS + ("punct", "root")))

# dependent-before-head setting of the target language
TARGET_ORDER = {
    "nsubj": True,
    "obj": False,
    "obl": False,
    "amod": False,
    "det": True,
    "case": True,
    "advmod": True,
}

VOCAB_SIZES = {"ADJ": 30, "ADP": 8, "ADV": 16, "DET": 6, "NOUN": 60, "PRON": 6, "PUNCT": 2, "VERB": 40}
SUFFIXES = {
    "ADJ": ("ik", "ul"),
    "ADP": ("",),
    "ADV": ("mente", "wise"),
    "DET": ("",),
    "NOUN": ("a", "o", "um"),
    "PRON": ("",),
    "VERB": ("ti", "en", "ar"),
}
_SYLLABLES = ("ba", "de", "ki", "lo", "mu", "na", "pe", "ri", "so", "tu", "va", "ze", "go", "hi", "ju", "fa")


@dataclasses.dataclass(frozen=True)
class Language:
    name: str
    order: dict
    lexicon: dict  # form -> tag

    def words(self, tag: str) -> list[str]:
        return sorted(f for f, t in self.lexicon.items() if t == tag)


def base_lexicon(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    lexicon: dict = {}
    for tag in TAGS:
        if tag == "PUNCT":
            lexicon.update({".": tag, "!": tag})
            continue
        made = 0
        while made < VOCAB_SIZES[tag]:
            stem = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(1, 3))))
            form = stem + str(rng.choice(SUFFIXES[tag]))
            if tag in ("ADP", "DET", "PRON"):
                form = form[:3] or form
            if form not in lexicon:
                lexicon[form] = tag
                made += 1
    return lexicon


def diverge_lexicon(lexicon: dict, forms: Sequence[str], rng: np.random.Generator) -> dict:
    """Copy of ``lexicon`` where each form in ``forms`` carries another content tag."""
    out = dict(lexicon)
    for f in forms:
        others = [t for t in CONTENT_TAGS if t != lexicon[f]]
        out[f] = str(rng.choice(others))
    return out


def _noun_phrase(lang: Language, rng, relation: str, head_of: int, nodes: list) -> None:
    """Append a noun phrase attached by ``relation`` to node ``head_of``.

    ``nodes`` holds ``(form, tag, head_node, relation, children)`` records.
    """
    pron = relation == "nsubj" and rng.random() < 0.3
    tag = "PRON" if pron else "NOUN"
    me = len(nodes)
    nodes.append([str(rng.choice(lang.words(tag))), tag, head_of, relation, []])
    nodes[head_of][4].append(me)
    if pron:
        return
    if rng.random() < 0.7:
        _leaf(lang, rng, "DET", "det", me, nodes)
    if rng.random() < 0.4:
        _leaf(lang, rng, "ADJ", "amod", me, nodes)
    if relation == "obl":
        _leaf(lang, rng, "ADP", "case", me, nodes)


def _leaf(lang: Language, rng, tag: str, relation: str, head_of: int, nodes: list) -> None:
    me = len(nodes)
    nodes.append([str(rng.choice(lang.words(tag))), tag, head_of, relation, []])
    nodes[head_of][4].append(me)


def _linearize(lang: Language, nodes: list, v: int, rng) -> list[int]:
    before, after = [], []
    for c in nodes[v][4]:
        rel = nodes[c][3]
        if rel == "punct":
            continue
        (before if lang.order[rel] else after).append(c)
    out: list[int] = []
    for c in before:
        out.extend(_linearize(lang, nodes, c, rng))
    out.append(v)
    for c in after:
        out.extend(_linearize(lang, nodes, c, rng))
    return out


def generate_sentence(lang: Language, rng: np.random.Generator, sent_id: str, max_length: int = 10) -> Sentence:
    while True:
        nodes: list = [["<root>", "ROOT", -1, "", []]]
        _leaf(lang, rng, "VERB", "root", 0, nodes)
        verb = 1
        if rng.random() < 0.9:
            _noun_phrase(lang, rng, "nsubj", verb, nodes)
        if rng.random() < 0.7:
            _noun_phrase(lang, rng, "obj", verb, nodes)
        if rng.random() < 0.4:
            _noun_phrase(lang, rng, "obl", verb, nodes)
        if rng.random() < 0.35:
            _leaf(lang, rng, "ADV", "advmod", verb, nodes)
        order = _linearize(lang, nodes, verb, rng)
        if rng.random() < 0.6:
            _leaf(lang, rng, "PUNCT", "punct", verb, nodes)
            order.append(len(nodes) - 1)
        if len(order) <= max_length:
            break
    position = {v: k + 1 for k, v in enumerate(order)}
    tokens = []
    for v in order:
        form, tag, head, rel, _ = nodes[v]
        tokens.append(Token(form=form, upos=tag, head=0 if head == 0 else position[head], deprel=rel))
    return Sentence(tuple(tokens), sent_id)


def generate_corpus(lang: Language, size: int, seed: int, prefix: str, max_length: int = 10) -> Corpus:
    rng = np.random.default_rng(seed)
    return Corpus(tuple(generate_sentence(lang, rng, f"{prefix}-{i + 1}", max_length) for i in range(size)))


@dataclasses.dataclass(frozen=True)
class SourceSpec:
    language: Language
    train_size: int
    quality: str  # "close", "distant" or "noisy"


@dataclasses.dataclass(frozen=True)
class Benchmark:
    target: Language
    sources: tuple[SourceSpec, ...]
    source_corpora: tuple[Corpus, ...]
    unlabelled: Corpus  # target sentences with gold kept (strip before training)
    labelled: Corpus  # small labelled target sample
    test: Corpus


def make_languages(
    seed: int,
    n_distant: int = 2,
    n_noisy: int = 1,
    close_flips: Sequence[str] = ("det",),
    distant_flips: Sequence[str] = ("obj", "amod", "case"),
    close_divergence: float = 0.05,
    distant_divergence: float = 0.3,
    own_divergence: float = 0.05,
    noisy_divergence: float = 0.5,
) -> tuple[Language, list[Language]]:
    """Target language, then one close, ``n_distant`` distant and ``n_noisy`` noisy sources.

    A noisy language mirrors every word-order setting of the target and
    retags most content words, so its models are mostly wrong on target text.
    """
    rng = np.random.default_rng(seed)
    lexicon = base_lexicon(int(rng.integers(2**31)))
    target = Language("target", dict(TARGET_ORDER), lexicon)
    content = sorted(f for f, t in lexicon.items() if t in CONTENT_TAGS)
    n_content = len(content)

    def flipped(names):
        order = dict(TARGET_ORDER)
        for r in names:
            order[r] = not order[r]
        return order

    sample = lambda frac, pool: list(rng.choice(pool, size=int(round(frac * len(pool))), replace=False))
    close = Language(
        "close",
        flipped(close_flips),
        diverge_lexicon(lexicon, sample(close_divergence, content), rng),
    )
    family = sample(distant_divergence, content)
    family_lexicon = diverge_lexicon(lexicon, family, rng)
    rest = [f for f in content if f not in set(family)]
    distant = []
    for k in range(n_distant):
        own = sample(own_divergence * n_content / max(len(rest), 1), rest)
        distant.append(
            Language(f"distant{k + 1}", flipped(distant_flips), diverge_lexicon(family_lexicon, own, rng))
        )
    noisy = [
        Language(f"noisy{k + 1}", flipped(RELATIONS), diverge_lexicon(lexicon, sample(noisy_divergence, content), rng))
        for k in range(n_noisy)
    ]
    return target, [close] + distant + noisy


def make_benchmark(
    seed: int,
    n_distant: int = 2,
    n_noisy: int = 1,
    close_size: int = 200,
    distant_size: int = 40,
    unlabelled_size: int = 150,
    labelled_size: int = 50,
    test_size: int = 100,
    max_length: int = 10,
    **language_kwargs,
) -> Benchmark:
    target, langs = make_languages(seed, n_distant, n_noisy, **language_kwargs)
    sizes = [close_size] + [distant_size] * (n_distant + n_noisy)
    qualities = ["close"] + ["distant"] * n_distant + ["noisy"] * n_noisy
    sources = tuple(SourceSpec(lang, size, q) for lang, size, q in zip(langs, sizes, qualities))
    corpora = tuple(
        generate_corpus(s.language, s.train_size, seed * 1000 + k + 1, s.language.name, max_length)
        for k, s in enumerate(sources)
    )
    base = seed * 1000 + 500
    return Benchmark(
        target=target,
        sources=sources,
        source_corpora=corpora,
        unlabelled=generate_corpus(target, unlabelled_size, base + 1, "unl", max_length),
        labelled=generate_corpus(target, labelled_size, base + 2, "lab", max_length),
        test=generate_corpus(target, test_size, base + 3, "test", max_length),
    )


def strip(corpus: Corpus, task: str) -> Corpus:
    """Remove what the task predicts: trees for parsing (UPOS stays as input), tags for tagging."""
    if task == "parsing":
        return Corpus(tuple(s.unlabelled() for s in corpus))
    return Corpus(tuple(s.untagged().unlabelled() for s in corpus))
