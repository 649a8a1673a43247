"""End-to-end transfer runs on the synthetic benchmark.

Source models are trained on their own languages, then a target model is
trained on unlabelled target sentences for each method and scored on the
held-out target test split next to the majority-vote ensemble.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

from . import metrics, synth
from .conllu import Corpus
from .ensemble import DEFAULT_SIGMA, EnsembleSpec, mv_predict
from .model import ScoringModel, gold_structure
from .structures import PARSING, TAGGING, DepTree
from .training import TrainConfig, build_charts, train_supervised, train_target


@dataclasses.dataclass(frozen=True)
class Recipe:
    """Hyperparameters for the desk-scale benchmark (tuned on synthetic data, not taken from UD)."""

    source_eta: float = 0.05
    source_epochs: int = 15
    close_lam: float = 0.01
    distant_lam: float = 1.0
    noisy_lam: float = 10.0
    target_eta: float = 0.1
    target_lam: float = 0.001
    target_epochs: int = 30
    batch_size: int = 10
    hash_dim: int = 2**18
    sigma: float = DEFAULT_SIGMA

    def source_config(self, quality: str, seed: int) -> TrainConfig:
        lam = {"close": self.close_lam, "distant": self.distant_lam, "noisy": self.noisy_lam}[quality]
        return TrainConfig(self.source_eta, lam, self.source_epochs, self.batch_size, self.sigma, seed)

    def target_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.target_eta, self.target_lam, self.target_epochs, self.batch_size, self.sigma, seed)


RECIPES = {PARSING: Recipe(target_eta=0.1), TAGGING: Recipe(target_eta=0.3)}


def inventory_for(task: str) -> tuple[str, ...]:
    return synth.LABELS if task == PARSING else synth.TAGS


def train_sources(bench: synth.Benchmark, task: str, recipe: Recipe, seed: int) -> list[ScoringModel]:
    models = []
    for spec, corpus in zip(bench.sources, bench.source_corpora):
        config = recipe.source_config(spec.quality, seed)
        result = train_supervised(corpus, task, config, labels=inventory_for(task), hash_dim=recipe.hash_dim)
        models.append(result.model)
    return models


def predict_corpus(model: ScoringModel, corpus: Corpus) -> Corpus:
    return Corpus(tuple(model.predict(s) for s in corpus))


def mv_corpus(ensemble: EnsembleSpec, corpus: Corpus) -> Corpus:
    out = []
    for s in corpus:
        y = mv_predict(ensemble, s)
        out.append(s.with_tree(y.heads, y.labels) if isinstance(y, DepTree) else s.with_tags(y.tags))
    return Corpus(tuple(out))


@dataclasses.dataclass
class MethodResult:
    accuracy: float
    charts: Optional[metrics.ChartSummary]


@dataclasses.dataclass
class SeedResult:
    task: str
    seed: int
    source_accuracy: list[float]
    mv_accuracy: float
    methods: dict[str, MethodResult]


def run_seed(
    task: str,
    seed: int,
    methods: Sequence[str] = ("pptx", "lop"),
    recipe: Optional[Recipe] = None,
    alphas: Optional[Sequence[float]] = None,
    bench: Optional[synth.Benchmark] = None,
    sources: Optional[Sequence[ScoringModel]] = None,
) -> SeedResult:
    """Train sources (unless given), then one target model per method."""
    recipe = recipe if recipe is not None else RECIPES[task]
    bench = bench if bench is not None else synth.make_benchmark(seed)
    if sources is None:
        sources = train_sources(bench, task, recipe, seed)
    ensemble = EnsembleSpec(list(sources), alphas)
    test_in = synth.strip(bench.test, task)
    source_acc = [metrics.evaluate(predict_corpus(m, test_in), bench.test, task).accuracy for m in sources]
    mv_acc = metrics.evaluate(mv_corpus(ensemble, test_in), bench.test, task).accuracy
    unlabelled = synth.strip(bench.unlabelled, task)
    results = {}
    for method in methods:
        charts = build_charts(ensemble, list(unlabelled), method, recipe.sigma)
        stats = [metrics.chart_stats(c, gold_structure(g, task)) for c, g in zip(charts, bench.unlabelled)]
        res = train_target(ensemble, unlabelled, method, recipe.target_config(seed), charts=charts)
        acc = metrics.evaluate(predict_corpus(res.model, test_in), bench.test, task).accuracy
        results[method] = MethodResult(acc, metrics.summarize(stats))
    return SeedResult(task, seed, source_acc, mv_acc, results)
