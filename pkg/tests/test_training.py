import math

import numpy as np
import pytest

from conftest import random_arc_mask, random_pair_mask, random_sentence
from pooltransfer import chain, dep
from pooltransfer.chain import PairMask
from pooltransfer.conllu import Corpus, Sentence, Token
from pooltransfer.ensemble import ChartSpec, EnsembleSpec, singleton_chart
from pooltransfer.model import ScoringModel, gold_structure
from pooltransfer.structures import DepTree, TagSeq, arc_support
from pooltransfer.training import (
    TrainConfig,
    build_charts,
    chart_log_prob,
    fit,
    loss_and_gradient,
    train_supervised,
    train_target,
)


def random_model(rng, task, labels, dim=127, scale=1.0):
    return ScoringModel.zeros(task, labels, hash_dim=dim).with_weights(rng.normal(scale=scale, size=dim))


def full_chart(task, labels, n):
    mask = arc_support(n, len(labels)) if task == "parsing" else PairMask.full(n, len(labels))
    return ChartSpec(task, labels, mask)


TASKS = [("parsing", ("a", "b")), ("tagging", ("A", "B", "C"))]


@pytest.mark.parametrize("task,labels", TASKS)
def test_full_chart_has_probability_one(rng, task, labels):
    model = random_model(rng, task, labels)
    for n in (1, 3, 5):
        assert chart_log_prob(model, random_sentence(rng, n), full_chart(task, labels, n)) == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("task,labels", TASKS)
def test_singleton_chart_is_log_likelihood(rng, task, labels):
    model = random_model(rng, task, labels)
    s = random_sentence(rng, 4)
    scores = model.score(s)
    y = model.decode(s)
    if task == "parsing":
        want = sum(scores.scores[h, j, labels.index(l)] for j, (h, l) in enumerate(zip(y.heads, y.labels), 1))
        want -= dep.dep_log_partition(scores)
    else:
        want = chain.sequence_score(scores, y) - chain.chain_log_partition(scores)
    assert chart_log_prob(model, s, singleton_chart(y, labels)) == pytest.approx(want, abs=1e-10)


def test_extras_outside_an_empty_mask(rng):
    labels = ("A", "B")
    model = random_model(rng, "tagging", labels)
    s = random_sentence(rng, 3)
    y1, y2 = TagSeq(("A", "B", "A")), TagSeq(("B", "B", "B"))
    chart = ChartSpec("tagging", labels, PairMask.empty(3, 2), (y1, y2))
    scores = model.score(s)
    log_z = chain.chain_log_partition(scores)
    want = math.log(math.exp(chain.sequence_score(scores, y1) - log_z) + math.exp(chain.sequence_score(scores, y2) - log_z))
    assert chart_log_prob(model, s, chart) == pytest.approx(want, abs=1e-10)


def test_empty_chart_is_an_error(rng):
    model = random_model(rng, "parsing", ("a",))
    s = random_sentence(rng, 3)
    with pytest.raises(ValueError, match="no structure"):
        chart_log_prob(model, s, ChartSpec("parsing", ("a",), np.zeros((4, 4, 1), dtype=bool)))
    with pytest.raises(ValueError):
        chart_log_prob(model, s, full_chart("parsing", ("a",), 2))


@pytest.mark.parametrize("task,labels", TASKS)
def test_monotone_masking(rng, task, labels):
    model = random_model(rng, task, labels)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        s = random_sentence(rng, n)
        if task == "parsing":
            big = random_arc_mask(rng, n, len(labels), keep=0.8) & arc_support(n, len(labels))
            small = big & (rng.random(big.shape) < 0.7)
            if dep.count_trees(small) == 0:
                continue
            a, b = ChartSpec(task, labels, small), ChartSpec(task, labels, big)
        else:
            big = random_pair_mask(rng, n, len(labels), keep=0.8)
            small = PairMask(big.pairs & (rng.random(big.pairs.shape) < 0.7), big.unary)
            if chain.count_sequences(small) == 0:
                continue
            a, b = ChartSpec(task, labels, small), ChartSpec(task, labels, big)
        assert chart_log_prob(model, s, a) <= chart_log_prob(model, s, b) + 1e-12


@pytest.mark.parametrize("task,labels", TASKS)
def test_full_chart_zero_loss_and_gradient(rng, task, labels):
    model = random_model(rng, task, labels)
    batch = [(s, full_chart(task, labels, len(s))) for s in (random_sentence(rng, 3), random_sentence(rng, 2))]
    loss, grad = loss_and_gradient(model, batch, 0.0)
    assert abs(loss) < 1e-10 and np.abs(grad).max() < 1e-10


def test_regulariser_vanishes_at_theta0(rng):
    model = random_model(rng, "tagging", ("A", "B"))
    batch = [(random_sentence(rng, 3), singleton_chart(TagSeq(("A", "B", "B")), ("A", "B")))]
    plain = loss_and_gradient(model, batch, 0.0)
    reg = loss_and_gradient(model, batch, 123.0, model.weights.copy())
    assert reg[0] == plain[0] and np.array_equal(reg[1], plain[1])


@pytest.mark.parametrize("task,labels", TASKS)
def test_gradient_matches_finite_differences(rng, task, labels):
    model = random_model(rng, task, labels, dim=31)
    s = random_sentence(rng, 3)
    chart = singleton_chart(model.with_weights(-model.weights).decode(s), labels)
    theta0 = rng.normal(size=31)
    _, grad = loss_and_gradient(model, [(s, chart)], 0.3, theta0)
    fd = np.empty(31)
    for i in range(31):
        e = np.zeros(31)
        e[i] = 1e-5
        up = loss_and_gradient(model.with_weights(model.weights + e), [(s, chart)], 0.3, theta0)[0]
        down = loss_and_gradient(model.with_weights(model.weights - e), [(s, chart)], 0.3, theta0)[0]
        fd[i] = (up - down) / 2e-5
    assert np.linalg.norm(grad - fd) <= 1e-5 * np.linalg.norm(fd)


# trainers


def _parse_corpus():
    patterns = [
        ([("the", "DET"), ("dog", "NOUN"), ("runs", "VERB")], [2, 3, 0], ["det", "nsubj", "root"]),
        ([("a", "DET"), ("cat", "NOUN"), ("sleeps", "VERB"), ("now", "ADV")], [2, 3, 0, 3], ["det", "nsubj", "root", "advmod"]),
        ([("cats", "NOUN"), ("sleep", "VERB")], [2, 0], ["nsubj", "root"]),
        ([("the", "DET"), ("bird", "NOUN"), ("sings", "VERB")], [2, 3, 0], ["det", "nsubj", "root"]),
        ([("dogs", "NOUN"), ("run", "VERB"), ("fast", "ADV")], [2, 0, 2], ["nsubj", "root", "advmod"]),
    ]
    return Corpus(
        tuple(
            Sentence(tuple(Token(f, u, h, r) for (f, u), h, r in zip(toks, heads, rels)), f"p{i}")
            for i, (toks, heads, rels) in enumerate(patterns)
        )
    )


@pytest.mark.parametrize("task", ["parsing", "tagging"])
def test_supervised_fits_separable_corpus(task):
    corpus = _parse_corpus()
    result = train_supervised(corpus, task, TrainConfig(eta=0.5, lam=0.0, epochs=40, batch_size=2), hash_dim=4096)
    for s in corpus:
        assert result.model.decode(s) == gold_structure(s, task)
    assert result.history[-1] < result.history[0]


def test_supervised_strong_regulariser_keeps_weights_near_zero():
    result = train_supervised(_parse_corpus(), "parsing", TrainConfig(eta=0.5, lam=1e6, epochs=5, batch_size=2), hash_dim=1024)
    assert np.abs(result.model.weights).max() < 1e-3


def test_supervised_needs_gold():
    unlabelled = Corpus(tuple(s.unlabelled() for s in _parse_corpus()))
    with pytest.raises(ValueError):
        train_supervised(unlabelled, "parsing", TrainConfig(eta=0.1, lam=0.0, epochs=1))


def _sources(task):
    config = TrainConfig(eta=0.3, lam=0.0, epochs=10, batch_size=2)
    a = train_supervised(_parse_corpus(), task, config, hash_dim=1024).model
    rng = np.random.default_rng(5)
    return EnsembleSpec([a, a.with_weights(a.weights + rng.normal(scale=0.3, size=1024))])


def test_target_strong_regulariser_stays_at_theta0():
    ens = _sources("parsing")
    unlabelled = Corpus(tuple(s.unlabelled() for s in _parse_corpus()))
    res = train_target(ens, unlabelled, "lop", TrainConfig(eta=0.5, lam=1e6, epochs=5, batch_size=2))
    assert np.abs(res.model.weights - ens.sources[0].weights).max() < 1e-3


def test_self_training_objective_non_increasing():
    ens = _sources("tagging")
    single = EnsembleSpec(ens.sources[:1])
    corpus = Corpus(tuple(s.untagged() for s in _parse_corpus()))
    res = train_target(single, corpus, "pptx", TrainConfig(eta=0.01, lam=0.0, epochs=8, batch_size=5, sigma=0.0), track_objective=True)
    assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))


def test_target_is_deterministic_and_validates():
    ens = _sources("tagging")
    corpus = Corpus(tuple(s.untagged() for s in _parse_corpus()))
    config = TrainConfig(eta=0.2, lam=0.01, epochs=3, batch_size=2, seed=4)
    a = train_target(ens, corpus, "lop", config).model
    b = train_target(ens, corpus, "lop", config).model
    assert np.array_equal(a.weights, b.weights)
    with pytest.raises(ValueError):
        train_target(ens, corpus, "lop", TrainConfig(eta=0.2, lam=0.0, epochs=1, max_length=1))
    with pytest.raises(ValueError):
        build_charts(ens, list(corpus), "vote")


def test_config_validation_and_defaults():
    c = TrainConfig.for_task("parsing", eta=None, epochs=2)
    assert c.eta == 9.4e-5 and c.lam == 1.6e-4 and c.epochs == 2
    for bad in (dict(eta=0.0), dict(lam=-1.0), dict(epochs=0), dict(sigma=1.5)):
        with pytest.raises(ValueError):
            TrainConfig(**{**dict(eta=0.1, lam=0.0, epochs=1), **bad})


def test_fit_rejects_empty():
    model = ScoringModel.zeros("tagging", ("A",), hash_dim=8)
    with pytest.raises(ValueError):
        fit(model, [], TrainConfig(eta=0.1, lam=0.0, epochs=1), model.weights)
