"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line."""

from __future__ import annotations

import json
import math
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import (
    oracle_arc_marginals,
    oracle_logsumexp,
    oracle_pair_marginals,
    oracle_sequence_table,
    oracle_tree_table,
    random_arc_mask,
    random_arc_scores,
    random_chain_scores,
    random_pair_mask,
    random_sentence,
    report,
)
from pooltransfer import chain, dep, experiment, metrics, synth
from pooltransfer.chain import PairMask
from pooltransfer.ensemble import (
    ChartSpec,
    EnsembleSpec,
    chart_from_flat,
    learn_alphas,
    lop_chart,
    lop_mask,
    lop_pool,
    pptx_chart,
    pptx_mask,
    singleton_chart,
    threshold_select,
)
from pooltransfer.model import ScoringModel
from pooltransfer.structures import DepTree, SubstructureDist, TagSeq, arc_support, arcs_to_flat
from pooltransfer.training import loss_and_gradient

N_INSTANCES = 50


def _parsing_instances(seed=1):
    rng = np.random.default_rng(seed)
    for _ in range(N_INSTANCES):
        n, n_labels = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        yield rng, random_arc_scores(rng, n, n_labels), random_arc_mask(rng, n, n_labels)


def _tagging_instances(seed=2):
    rng = np.random.default_rng(seed)
    for _ in range(N_INSTANCES):
        n, n_tags = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        yield rng, random_chain_scores(rng, n, n_tags), random_pair_mask(rng, n, n_tags)


def test_criterion_1_inference_exactness():
    start = time.perf_counter()
    worst = 0.0
    counts_exact = True
    for _, scores, mask in _parsing_instances():
        s = scores.scores
        for m in (None, mask):
            rows = oracle_tree_table(s, None if m is None else m & arc_support(scores.n, len(scores.labels)))
            expect = oracle_logsumexp(r[2] for r in rows)
            got = dep.dep_log_partition(scores, m)
            if expect == -math.inf:
                assert got == -math.inf
            else:
                worst = max(worst, abs(got - expect))
                marg = dep.arc_marginal_array(scores, m)
                worst = max(worst, float(np.abs(marg - oracle_arc_marginals(s, m)).max()))
            counts_exact &= dep.count_trees(scores.full_mask() if m is None else m) == len(rows)
    for _, scores, mask in _tagging_instances():
        for m in (None, mask):
            pairs = None if m is None else m.pairs
            unary = None if m is None else m.unary
            rows = oracle_sequence_table(scores.emit, scores.trans, pairs, unary)
            expect = oracle_logsumexp(r[1] for r in rows)
            got = chain.chain_log_partition(scores, m)
            if expect == -math.inf:
                assert got == -math.inf
            else:
                worst = max(worst, abs(got - expect))
                marg = chain.pair_marginal_array(scores, m)
                worst = max(worst, float(np.abs(marg - oracle_pair_marginals(scores.emit, scores.trans, pairs, unary)).max()))
            full = PairMask.full(scores.n, len(scores.tags))
            counts_exact &= chain.count_sequences(full if m is None else m) == len(rows)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and counts_exact and elapsed < 10.0
    report(1, ok, f"max abs error {worst:.2e}, counts exact {counts_exact}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_decoder_optimality():
    mismatches = 0
    for _, scores, _ in _parsing_instances():
        best = max(r[2] for r in oracle_tree_table(scores.scores))
        tree = dep.mst_decode(scores)
        got = math.fsum(scores.scores[h, j, scores.labels.index(l)] for j, (h, l) in enumerate(zip(tree.heads, tree.labels), 1))
        mismatches += not (tree.is_valid() and got == best)
    for _, scores, _ in _tagging_instances():
        best = max(r[1] for r in oracle_sequence_table(scores.emit, scores.trans))
        y = [scores.tags.index(t) for t in chain.viterbi_decode(scores).tags]
        got = math.fsum([scores.emit[j, t] for j, t in enumerate(y)] + [scores.trans[a, b] for a, b in zip(y, y[1:])])
        mismatches += got != best
    report(2, mismatches == 0, f"{mismatches} of {2 * N_INSTANCES} decodes differ from the enumerated optimum")
    assert mismatches == 0


def _random_chart_for(rng, model: ScoringModel, n: int) -> ChartSpec:
    labels = model.labels
    if model.task == "parsing":
        mask = random_arc_mask(rng, n, len(labels), keep=0.5)
        heads = [0] + [int(rng.integers(1, j)) for j in range(2, n + 1)]
        extra = DepTree(tuple(heads), tuple(str(rng.choice(labels)) for _ in range(n)))
    else:
        mask = random_pair_mask(rng, n, len(labels), keep=0.5)
        extra = TagSeq(tuple(str(rng.choice(labels)) for _ in range(n)))
    bare = ChartSpec(model.task, labels, mask)
    return ChartSpec(model.task, labels, mask, () if bare.in_mask(extra) else (extra,))


def _fd_rel_error(rng, task: str) -> float:
    labels = ("a", "b") if task == "parsing" else ("A", "B", "C")
    model = ScoringModel.zeros(task, labels, hash_dim=97)
    model = model.with_weights(rng.normal(scale=0.5, size=97))
    theta0 = rng.normal(scale=0.5, size=97)
    batch = []
    for b in range(2):
        n = int(rng.integers(1, 5))
        sentence = random_sentence(rng, n, f"s{b}")
        batch.append((sentence, _random_chart_for(rng, model, n)))
    lam = 0.1
    _, grad = loss_and_gradient(model, batch, lam, theta0)
    fd = np.zeros_like(grad)
    h = 1e-5
    for i in range(len(grad)):
        w = model.weights.copy()
        w[i] += h
        up = loss_and_gradient(model.with_weights(w), batch, lam, theta0)[0]
        w[i] -= 2 * h
        down = loss_and_gradient(model.with_weights(w), batch, lam, theta0)[0]
        fd[i] = (up - down) / (2 * h)
    return float(np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12))


def test_criterion_3_gradient_correctness():
    rng = np.random.default_rng(3)
    errors = [_fd_rel_error(rng, task) for task in ("parsing", "tagging") for _ in range(20)]
    worst = max(errors)
    report(3, worst < 1e-5, f"max relative error {worst:.2e} over {len(errors)} instances")
    assert worst < 1e-5


def _dist(rows) -> SubstructureDist:
    p = np.asarray(rows, dtype=float)
    return SubstructureDist(p, np.ones(p.shape, dtype=bool))


def test_criterion_4_lop_algebra():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        p = rng.dirichlet(np.ones(5) * 0.7, size=3)
        p = np.maximum(p, 1e-6)
        p /= p.sum(axis=1, keepdims=True)
        alphas = rng.dirichlet(np.ones(3))
        same = lop_pool([_dist(p)] * 3, alphas).probs
        worst = max(worst, float(np.abs(same - p).max()))
        other = rng.dirichlet(np.ones(5), size=3)
        first = lop_pool([_dist(p), _dist(other), _dist(other[::-1])], [1.0, 0.0, 0.0]).probs
        worst = max(worst, float(np.abs(first - p).max()))
    exact = lop_pool([_dist([[0.9, 0.1]]), _dist([[0.5, 0.5]])]).probs
    worst = max(worst, float(np.abs(exact - [[0.75, 0.25]]).max()))
    report(4, worst <= 1e-12, f"max deviation {worst:.2e} (identity cases and (0.9,0.1)+(0.5,0.5))")
    assert worst <= 1e-12


def _random_ensemble(rng, task: str, k: int) -> EnsembleSpec:
    labels = ("a", "b") if task == "parsing" else ("A", "B", "C")
    models = [
        ScoringModel.zeros(task, labels, hash_dim=211).with_weights(rng.normal(scale=float(rng.uniform(0.2, 3.0)), size=211))
        for _ in range(k)
    ]
    return EnsembleSpec(models)


def test_criterion_5_chart_semantics():
    rng = np.random.default_rng(5)
    prefix_failures = 0
    for _ in range(100):
        m = int(rng.integers(1, 12))
        probs = rng.dirichlet(np.ones(m) * float(rng.uniform(0.1, 2.0)))
        probs = np.round(probs, 2) if rng.random() < 0.3 else probs  # exercise ties
        probs = probs / probs.sum()
        sigma = float(rng.choice([0.0, 0.5, 0.7, 0.9, 0.95, 1.0]))
        picked = threshold_select(probs, sigma)
        ordered = sorted(range(m), key=lambda c: (-probs[c], c))
        ok = list(picked) == ordered[: len(picked)]
        mass = probs[picked].sum()
        drop = probs[picked[:-1]].sum()
        reaches = mass >= sigma - 1e-12 or probs[ordered[len(picked)]] == 0 if len(picked) < m else True
        minimal = len(picked) == 1 or drop < sigma - 1e-12
        prefix_failures += not (ok and reaches and minimal)
    member_failures = 0
    for t in range(100):
        task = "parsing" if t % 2 == 0 else "tagging"
        ens = _random_ensemble(rng, task, int(rng.integers(1, 5)))
        sentence = random_sentence(rng, int(rng.integers(1, 6)))
        _, best = ens.outputs(sentence)
        for chart in (pptx_chart(ens, sentence, 0.95), lop_chart(ens, sentence, 0.95)):
            flat = chart.flat_mask()
            for y in best:
                if isinstance(y, DepTree):
                    inside = all(flat[j - 1, h * len(ens.labels) + ens.labels.index(l)] for j, (h, l) in enumerate(zip(y.heads, y.labels), 1))
                else:
                    idx = [ens.labels.index(x) for x in y.tags]
                    cands = idx if len(idx) == 1 else [a * len(ens.labels) + b for a, b in zip(idx, idx[1:])]
                    inside = all(flat[p, c] for p, c in enumerate(cands))
                member_failures += not (inside or y in chart.extras)
    ok = prefix_failures == 0 and member_failures == 0
    report(5, ok, f"prefix failures {prefix_failures}/100, 1-best membership failures {member_failures}")
    assert ok


def _table1_trial(rng, n_sentences: int = 5) -> tuple[float, float]:
    labels = ("a", "b")
    pptx_sizes, lop_sizes = [], []
    for _ in range(n_sentences):
        n = int(rng.integers(4, 9))
        base = rng.normal(scale=1.0, size=(n + 1, n + 1, len(labels)))
        gold = [int(rng.integers(1, j)) if j > 1 else 0 for j in range(1, n + 1)]
        for j, h in enumerate(gold, start=1):
            base[h, j, 0] += 6.0
        dists, best = [], []
        for k in range(4):
            noise = 0.05 if k == 3 else 0.5
            s = rng.normal(scale=noise, size=base.shape) + (0.0 if k == 3 else base)
            scores = dep.ArcScores(s, labels)
            dists.append(dep.arc_marginals(scores))
            best.append(dep.mst_decode(scores))
        for build, sizes in ((pptx_mask(dists, 0.95), pptx_sizes), (lop_mask(dists, 0.95), lop_sizes)):
            chart = chart_from_flat("parsing", labels, n, build, best)
            sizes.append(metrics.chart_size(chart)[1])
    return statistics.median(lop_sizes), statistics.median(pptx_sizes)


def test_criterion_6_table1_direction():
    rng = np.random.default_rng(6)
    wins = 0
    ratios = []
    for _ in range(100):
        lop_med, pptx_med = _table1_trial(rng)
        wins += lop_med < pptx_med
        ratios.append(lop_med / pptx_med)
    report(6, wins >= 95, f"LOP median < PPTX median in {wins}/100 trials (median ratio {statistics.median(ratios):.2e})")
    assert wins >= 95


SEEDS = range(5)


@pytest.fixture(scope="module")
def benchmark_runs():
    """Per task and seed: MV, PPTX and LOP accuracies with uniform weights, plus
    LOP with learned weights and the pool KL both ways."""
    runs = {}
    c7_time = 0.0
    for task in ("parsing", "tagging"):
        recipe = experiment.RECIPES[task]
        for seed in SEEDS:
            start = time.perf_counter()
            bench = synth.make_benchmark(seed)
            sources = experiment.train_sources(bench, task, recipe, seed)
            uniform = experiment.run_seed(task, seed, ("pptx", "lop"), recipe, bench=bench, sources=sources)
            c7_time += time.perf_counter() - start
            ens = EnsembleSpec(sources)
            fit = learn_alphas(ens, bench.labelled)
            learned = experiment.run_seed(task, seed, ("lop",), recipe, alphas=fit.alphas, bench=bench, sources=sources)
            runs[task, seed] = {
                "mv": uniform.mv_accuracy,
                "pptx": uniform.methods["pptx"].accuracy,
                "lop": uniform.methods["lop"].accuracy,
                "pptx_precision": uniform.methods["pptx"].charts.precision,
                "lop_precision": uniform.methods["lop"].charts.precision,
                "lop_learned": learned.methods["lop"].accuracy,
                "kl_uniform": metrics.pool_kl(ens, None, bench.labelled),
                "kl_learned": metrics.pool_kl(ens, fit.alphas, bench.labelled),
                "alphas": fit.alphas,
            }
    return runs, c7_time


def _mean(runs, task, key):
    return float(np.mean([runs[task, s][key] for s in SEEDS]))


@pytest.mark.slow
def test_criterion_7_end_to_end_ordering(benchmark_runs):
    runs, elapsed = benchmark_runs
    ok = elapsed < 300.0
    parts = []
    for task in ("parsing", "tagging"):
        mv, pptx, lop = (_mean(runs, task, k) for k in ("mv", "pptx", "lop"))
        p_pptx, p_lop = _mean(runs, task, "pptx_precision"), _mean(runs, task, "lop_precision")
        ok &= lop >= mv and lop >= pptx and p_lop >= p_pptx
        parts.append(f"{task}: MV {mv:.3f} PPTX {pptx:.3f} LOP {lop:.3f}, precision PPTX {p_pptx:.3f} LOP {p_lop:.3f}")
    report(7, ok, "; ".join(parts) + f"; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_learned_alphas(benchmark_runs):
    runs, _ = benchmark_runs
    ok = True
    parts = []
    for task in ("parsing", "tagging"):
        kl_ok = all(runs[task, s]["kl_learned"] <= runs[task, s]["kl_uniform"] for s in SEEDS)
        uni, lrn = _mean(runs, task, "lop"), _mean(runs, task, "lop_learned")
        ok &= kl_ok and lrn >= uni - 0.005
        parts.append(
            f"{task}: KL {_mean(runs, task, 'kl_uniform'):.3f} -> {_mean(runs, task, 'kl_learned'):.3f}, "
            f"LOP accuracy uniform {uni:.4f} learned {lrn:.4f}"
        )
    report(8, ok, "; ".join(parts))
    assert ok


def test_criterion_9_metric_fixed_points():
    rng = np.random.default_rng(9)
    exact = True
    for t in range(40):
        n = int(rng.integers(1, 6))
        if t % 2 == 0:
            labels = ("a", "b")
            heads = [0] + [int(rng.integers(1, j)) for j in range(2, n + 1)]
            order = rng.permutation(n) + 1
            relabel = {0: 0, **{j: int(order[j - 1]) for j in range(1, n + 1)}}
            heads_perm = [0] * n
            for j, h in enumerate(heads, start=1):
                heads_perm[relabel[j] - 1] = relabel[h]
            gold = DepTree(tuple(heads_perm), tuple(str(rng.choice(labels)) for _ in range(n)))
            full = ChartSpec("parsing", labels, arc_support(n, len(labels)))
        else:
            labels = ("A", "B", "C")
            gold = TagSeq(tuple(str(rng.choice(labels)) for _ in range(n)))
            full = ChartSpec("tagging", labels, PairMask.full(n, len(labels)))
        single = singleton_chart(gold, labels)
        st = metrics.chart_stats(single, gold)
        exact &= st.precision == 1.0 and st.recall == 1.0
        exact &= metrics.chart_precision([(single, gold)]) == 1.0 and metrics.chart_recall([(single, gold)]) == 1.0
        exact &= metrics.chart_stats(full, gold).recall == 1.0
        if metrics.chart_size(full)[1] <= 10**5:
            exact &= metrics.chart_recall([(full, gold)]) == 1.0
    report(9, exact, "singleton-gold precision = recall = 1 and full-mask recall = 1 on 40 charts")
    assert exact


def test_criterion_10_transfer_determinism(tmp_path):
    def cli(*args):
        done = subprocess.run([sys.executable, "-m", "pooltransfer.cli", *args], cwd=tmp_path, capture_output=True, text=True)
        assert done.returncode == 0, done.stderr
        return done.stdout

    cli("synth", "--out", "bench", "--seed", "3", "--close-size", "40", "--distant-size", "20", "--unlabelled-size", "30", "--test-size", "10")
    models = []
    for name in ("close", "distant1", "noisy1"):
        cli("train-source", "--task", "tagging", "--train", f"bench/sources/{name}.conllu", "--out", f"{name}.json",
            "--epochs", "3", "--batch-size", "10", "--eta", "0.05", "--lam", "0.1", "--hash-dim", "4096",
            "--labels", ",".join(synth.TAGS))
        models.append(f"{name}.json")
    (tmp_path / "cfg.json").write_text(json.dumps({"eta": 0.2, "epochs": 3, "batch_size": 8, "seed": 7}))
    outputs = []
    for run in ("run1", "run2"):
        cli("transfer", "--config", "cfg.json", "--task", "tagging", "--method", "lop", "--sources", *models,
            "--unlabelled", "bench/target/unlabelled.conllu", "--out", run)
        outputs.append((tmp_path / run / "model.json").read_bytes())
    same = outputs[0] == outputs[1]
    report(10, same, f"two transfer runs produced {'byte-identical' if same else 'different'} model files ({len(outputs[0])} bytes)")
    assert same
