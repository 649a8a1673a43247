"""Chart diagnostics and task evaluation.

Chart precision is the fraction of substructure occurrences, over all chart
members, that are gold; chart recall is the fraction of gold substructures that
occur in at least one chart member. Extras (1-best structures outside the mask)
are chart members.

Two routes compute the same numbers: :func:`chart_precision` and
:func:`chart_recall` enumerate the chart, while :func:`chart_stats` counts
structures with a forced substructure and never enumerates.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import statistics
from typing import Optional, Sequence

import numpy as np

from . import chain, dep
from .conllu import Corpus
from .ensemble import ChartSpec, EnsembleSpec, pool_kl_value
from .structures import PARSING, TAGGING, DepTree, Structure, substructures

DEFAULT_ENUMERATION_CAP = 10**6
PUNCT = "PUNCT"

CSV_COLUMNS = ("sent_id", "size_masked", "size_total", "precision_num", "precision_den", "recall_num", "recall_den")


class ChartTooLarge(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class ChartStats:
    size_masked: float
    size_total: float
    precision_num: float
    precision_den: float
    recall_num: float
    recall_den: float

    @property
    def precision(self) -> float:
        return self.precision_num / self.precision_den if self.precision_den else 0.0

    @property
    def recall(self) -> float:
        return self.recall_num / self.recall_den if self.recall_den else 0.0


def _count(chart: ChartSpec, mask) -> float:
    if chart.task == PARSING:
        return dep.count_trees(mask)
    return chain.count_sequences(mask)


def chart_size(chart: ChartSpec) -> tuple[float, float]:
    """Structures induced by the mask, and that count plus the extras."""
    masked = _count(chart, chart.mask)
    return masked, masked + len(chart.extras)


def _n_substructures(chart: ChartSpec) -> int:
    return chart.n if chart.task == PARSING or chart.n == 1 else chart.n - 1


def _forced_count(chart: ChartSpec, sub: tuple) -> float:
    """Number of mask-induced structures containing the substructure ``sub``."""
    index = {l: k for k, l in enumerate(chart.labels)}
    if chart.task == PARSING:
        h, j, l = sub
        if not chart.mask[h, j, index[l]]:
            return 0.0
        forced = chart.mask.copy()
        forced[:, j, :] = False
        forced[h, j, index[l]] = True
        return dep.count_trees(forced)
    mask = chain.PairMask(chart.mask.pairs.copy(), chart.mask.unary.copy())
    if chart.n == 1:
        (_, t) = sub
        return float(mask.unary[index[t]])
    j, a, b = sub
    if not mask.pairs[j - 1, index[a], index[b]]:
        return 0.0
    mask.pairs[j - 1] = False
    mask.pairs[j - 1, index[a], index[b]] = True
    return chain.count_sequences(mask)


def chart_stats(chart: ChartSpec, gold: Structure) -> ChartStats:
    """Per-sentence size, precision and recall terms, by counting."""
    size_masked, size_total = chart_size(chart)
    gold_subs = substructures(gold)
    per = _n_substructures(chart)
    p_num = 0.0
    r_num = 0.0
    for sub in sorted(gold_subs, key=repr):
        in_mask = _forced_count(chart, sub)
        in_extras = sum(1 for e in chart.extras if sub in substructures(e))
        p_num += in_mask + in_extras
        r_num += 1.0 if (in_mask > 0 or in_extras > 0) else 0.0
    return ChartStats(
        size_masked=size_masked,
        size_total=size_total,
        precision_num=p_num,
        precision_den=size_total * per,
        recall_num=r_num,
        recall_den=float(len(gold_subs)),
    )


def _members_capped(chart: ChartSpec, cap: int, name: str) -> list[Structure]:
    size = chart_size(chart)[1]
    if size > cap:
        raise ChartTooLarge(f"chart of sentence {name} has {size:.0f} structures, above the cap of {cap}")
    return list(chart.members())


def _names(pairs, ids):
    return ids if ids is not None else [f"#{i}" for i in range(len(pairs))]


def chart_precision(
    pairs: Sequence[tuple[ChartSpec, Structure]],
    cap: int = DEFAULT_ENUMERATION_CAP,
    ids: Optional[Sequence[str]] = None,
) -> float:
    """Corpus-level chart precision by enumerating every chart."""
    num = den = 0
    for (chart, gold), name in zip(pairs, _names(pairs, ids)):
        gold_subs = substructures(gold)
        for y in _members_capped(chart, cap, name):
            subs = substructures(y)
            num += len(subs & gold_subs)
            den += len(subs)
    return num / den if den else 0.0


def chart_recall(
    pairs: Sequence[tuple[ChartSpec, Structure]],
    cap: int = DEFAULT_ENUMERATION_CAP,
    ids: Optional[Sequence[str]] = None,
) -> float:
    """Corpus-level chart recall by enumerating every chart."""
    num = den = 0
    for (chart, gold), name in zip(pairs, _names(pairs, ids)):
        gold_subs = substructures(gold)
        covered: set = set()
        for y in _members_capped(chart, cap, name):
            covered |= substructures(y) & gold_subs
        num += len(covered)
        den += len(gold_subs)
    return num / den if den else 0.0


@dataclasses.dataclass(frozen=True)
class ChartSummary:
    n_sentences: int
    median_size_masked: float
    median_size_total: float
    precision: float
    recall: float


def summarize(stats: Sequence[ChartStats]) -> ChartSummary:
    if not stats:
        raise ValueError("no chart statistics to summarise")
    p_num = sum(s.precision_num for s in stats)
    p_den = sum(s.precision_den for s in stats)
    r_num = sum(s.recall_num for s in stats)
    r_den = sum(s.recall_den for s in stats)
    return ChartSummary(
        n_sentences=len(stats),
        median_size_masked=float(statistics.median(s.size_masked for s in stats)),
        median_size_total=float(statistics.median(s.size_total for s in stats)),
        precision=p_num / p_den if p_den else 0.0,
        recall=r_num / r_den if r_den else 0.0,
    )


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() and abs(x) < 2**53 else repr(float(x))


def stats_csv(rows: Sequence[tuple[str, Optional[ChartStats]]]) -> str:
    """One row per sentence plus a ``summary`` row (median sizes, summed counts).

    A sentence without gold structure has empty precision and recall cells.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for sent_id, st in rows:
        writer.writerow([sent_id, _num(st.size_masked), _num(st.size_total)] + [
            _num(getattr(st, c)) if st.recall_den else "" for c in CSV_COLUMNS[3:]
        ])
    if rows:
        stats = [st for _, st in rows]
        scored = [st for st in stats if st.recall_den]
        writer.writerow(
            [
                "summary",
                _num(statistics.median(s.size_masked for s in stats)),
                _num(statistics.median(s.size_total for s in stats)),
            ]
            + ([_num(sum(getattr(s, c) for s in scored)) for c in CSV_COLUMNS[3:]] if scored else [""] * 4)
        )
    return buf.getvalue()


def size_only_stats(chart: ChartSpec) -> ChartStats:
    size_masked, size_total = chart_size(chart)
    return ChartStats(size_masked, size_total, 0.0, 0.0, 0.0, 0.0)


def pool_kl(ensemble: EnsembleSpec, alphas, labelled: Corpus) -> float:
    """Mean (per position) KL from the gold one-hot distributions to the pool."""
    return pool_kl_value(ensemble, labelled, alphas)


# task evaluation


@dataclasses.dataclass(frozen=True)
class EvalReport:
    metric: str
    accuracy: float
    correct: int
    total: int
    rows: tuple[tuple[str, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "rows": [list(r) for r in self.rows],
        }


def _counts(pred: Corpus, gold: Corpus, task: str) -> tuple[int, int]:
    if len(pred) != len(gold):
        raise ValueError(f"corpora differ in size: {len(pred)} vs {len(gold)} sentences")
    correct = total = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise ValueError(f"sentence {g.id!r} has {len(p)} predicted vs {len(g)} gold tokens")
        for pt, gt in zip(p.tokens, g.tokens):
            if task == PARSING:
                if gt.upos == PUNCT:
                    continue
                if gt.head is None:
                    raise ValueError(f"sentence {g.id!r} lacks a gold tree")
                total += 1
                correct += pt.head == gt.head and pt.deprel == gt.deprel
            else:
                if gt.upos is None:
                    raise ValueError(f"sentence {g.id!r} lacks gold tags")
                total += 1
                correct += pt.upos == gt.upos
    return correct, total


def evaluate(pred: Corpus, gold: Corpus, task: str) -> EvalReport:
    """LAS without punctuation for parsing, tag accuracy for tagging."""
    correct, total = _counts(pred, gold, task)
    acc = correct / total if total else 0.0
    metric = "LAS" if task == PARSING else "UPOS accuracy"
    return EvalReport(metric, acc, correct, total, (("all", acc),))


def evaluate_many(pairs: dict, task: str) -> EvalReport:
    """Micro-averaged report over several named (pred, gold) pairs, one row each."""
    rows = []
    correct = total = 0
    for name in sorted(pairs):
        c, t = _counts(*pairs[name], task)
        rows.append((name, c / t if t else 0.0))
        correct += c
        total += t
    metric = "LAS" if task == PARSING else "UPOS accuracy"
    return EvalReport(metric, correct / total if total else 0.0, correct, total, tuple(rows))


def summary_json(summary: ChartSummary) -> str:
    return json.dumps(dataclasses.asdict(summary), indent=2, sort_keys=True) + "\n"
