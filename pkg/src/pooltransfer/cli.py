"""Command-line front end.

Every subcommand accepts ``--config FILE``: a JSON object with flat keys named
like the long flags (``batch_size`` or ``batch-size`` for ``--batch-size``). Flags given on the
command line win over file values. Artifact-producing subcommands write a
manifest (config echo, seed, input hashes, library versions) before their
results.

Inputs that a command must not peek at are stripped on reading: trees for
parsing, tags and trees for tagging. Gold annotation left in an unlabelled
file is only used by ``build-charts`` for chart precision and recall.

``POOLTRANSFER_WORKERS`` sets the number of worker processes used for chart
construction (default 1).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import logging
import os
import pathlib
import platform
import sys
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__, metrics, synth
from .conllu import Corpus, read_conllu, save_conllu, write_conllu
from .ensemble import DEFAULT_SIGMA, ChartSpec, EnsembleSpec, learn_alphas, lop_chart, pptx_chart
from .experiment import mv_corpus, predict_corpus
from .model import DEFAULT_HASH_DIM, DEFAULT_HASH_SEED, ScoringModel, gold_structure
from .structures import TASKS
from .training import TrainConfig, build_charts, filter_length, train_supervised, train_target

logger = logging.getLogger("pooltransfer")

WORKERS_ENV = "POOLTRANSFER_WORKERS"
ALPHA_SAMPLE = 50
CHART_METHODS = ("pptx", "lop")
TRANSFER_METHODS = ("pptx", "lop", "mv")


class UsageError(Exception):
    pass


# helpers


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_hash(path: str) -> str:
    return _sha256(pathlib.Path(path).read_bytes())


def _write_text(path: pathlib.Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_json(path: pathlib.Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    return {
        "pooltransfer": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _config_echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}


def write_manifest(path: pathlib.Path, args: argparse.Namespace, inputs: Sequence[str] = ()) -> None:
    _write_json(
        path,
        {
            "command": args.command,
            "config": _config_echo(args),
            "seed": getattr(args, "seed", None),
            "inputs": {p: _file_hash(p) for p in inputs},
            "versions": _versions(),
        },
    )


def _manifest_for_file(out: str) -> pathlib.Path:
    return pathlib.Path(out + ".manifest.json")


def _read_input(path: str, task: str) -> Corpus:
    return synth.strip(read_conllu(path), task)


def _load_sources(paths: Sequence[str], task: str) -> list[ScoringModel]:
    if not paths:
        raise UsageError("at least one --sources model is required")
    models = [ScoringModel.load(p) for p in paths]
    for p, m in zip(paths, models):
        if m.task != task:
            raise ValueError(f"model {p} is a {m.task} model, not {task}")
    return models


def _sample(corpus: Corpus, size: int, seed: int) -> Corpus:
    if len(corpus) <= size:
        return corpus
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(corpus), size=size, replace=False))
    return Corpus(tuple(corpus.sentences[i] for i in idx))


def _learned_alphas(ensemble: EnsembleSpec, labelled_path: str, seed: int) -> np.ndarray:
    labelled = _sample(read_conllu(labelled_path), ALPHA_SAMPLE, seed)
    return learn_alphas(ensemble, labelled).alphas


def _resolve_alphas(spec: str, ensemble: EnsembleSpec, args) -> Optional[np.ndarray]:
    if spec in (None, "uniform"):
        return None
    if spec == "learned":
        if not getattr(args, "labelled", None):
            raise UsageError("--alphas learned requires --labelled")
        return _learned_alphas(ensemble, args.labelled, args.seed)
    if os.path.exists(spec):
        return np.asarray(json.loads(pathlib.Path(spec).read_text())["alphas"], dtype=float)
    try:
        return np.asarray([float(a) for a in spec.split(",")])
    except ValueError:
        raise UsageError(f"--alphas must be 'uniform', 'learned', a JSON file or a comma list, not {spec!r}")


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, not {raw!r}")
    return max(n, 1)


def _chart_one(job):
    ensemble, sentence, method, sigma = job
    return (pptx_chart if method == "pptx" else lop_chart)(ensemble, sentence, sigma)


def _make_charts(ensemble: EnsembleSpec, sentences, method: str, sigma: float) -> list[ChartSpec]:
    workers = _workers()
    if workers == 1 or len(sentences) < 2 or method not in CHART_METHODS:
        return build_charts(ensemble, sentences, method, sigma)
    jobs = [(ensemble, s, method, sigma) for s in sentences]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_chart_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _cache_key(task, sentences, source_paths, method, sigma, alphas) -> str:
    key = {
        "task": task,
        "corpus": _sha256(write_conllu(Corpus(tuple(sentences))).encode()),
        "sources": [_file_hash(p) for p in source_paths],
        "method": method,
        "sigma": repr(float(sigma)),
        "alphas": None if alphas is None else [repr(float(a)) for a in alphas],
    }
    return _sha256(json.dumps(key, sort_keys=True).encode())


def charts_for(args, ensemble: EnsembleSpec, sentences, method: str) -> list[ChartSpec]:
    """Charts for ``sentences``, read from or stored in ``--cache-dir`` when given."""
    cache_dir = getattr(args, "cache_dir", None)
    if not cache_dir:
        return _make_charts(ensemble, sentences, method, args.sigma)
    key = _cache_key(args.task, sentences, args.sources, method, args.sigma, ensemble.alphas)
    path = pathlib.Path(cache_dir) / f"{key}.jsonl"
    if path.exists():
        logger.info("chart cache hit %s", path.name)
        return [ChartSpec.from_dict(json.loads(line)) for line in path.read_text().splitlines()]
    charts = _make_charts(ensemble, sentences, method, args.sigma)
    _write_text(path, "".join(c.dumps(s.id) + "\n" for c, s in zip(charts, sentences)))
    return charts


def _train_config(args, task: str) -> TrainConfig:
    return TrainConfig.for_task(
        task,
        eta=args.eta,
        lam=args.lam,
        epochs=args.epochs,
        batch_size=args.batch_size,
        sigma=getattr(args, "sigma", None),
        seed=args.seed,
        max_length=args.max_length,
    )


# subcommands


def cmd_synth(args) -> int:
    out = pathlib.Path(args.out)
    write_manifest(out / "manifest.json", args)
    bench = synth.make_benchmark(
        args.seed,
        n_distant=args.n_distant,
        n_noisy=args.n_noisy,
        close_size=args.close_size,
        distant_size=args.distant_size,
        unlabelled_size=args.unlabelled_size,
        labelled_size=args.labelled_size,
        test_size=args.test_size,
        max_length=args.max_length,
        distant_divergence=args.distant_divergence,
        noisy_divergence=args.noisy_divergence,
    )
    listing = []
    for spec, corpus in zip(bench.sources, bench.source_corpora):
        name = spec.language.name
        save_conllu(corpus, out / "sources" / f"{name}.conllu")
        listing.append({"name": name, "quality": spec.quality, "sentences": len(corpus)})
    _write_json(out / "sources.json", listing)
    for split in ("unlabelled", "labelled", "test"):
        save_conllu(getattr(bench, split), out / "target" / f"{split}.conllu")
    print(f"wrote benchmark for seed {args.seed} to {out}")
    return 0


def cmd_train_source(args) -> int:
    write_manifest(_manifest_for_file(args.out), args, [args.train])
    labels = args.labels.split(",") if args.labels else None
    result = train_supervised(
        read_conllu(args.train),
        args.task,
        _train_config(args, args.task),
        labels=labels,
        hash_dim=args.hash_dim,
        hash_seed=args.hash_seed,
    )
    result.model.save(args.out)
    print(f"trained {args.task} source model on {args.train}: final loss {result.history[-1]:.6g}")
    return 0


def cmd_build_charts(args) -> int:
    if args.method not in CHART_METHODS:
        raise UsageError(f"--method must be one of {CHART_METHODS}")
    out = pathlib.Path(args.out)
    write_manifest(out / "manifest.json", args, [args.unlabelled, *args.sources])
    ensemble = EnsembleSpec(_load_sources(args.sources, args.task))
    ensemble = ensemble.with_alphas(_resolve_alphas(args.alphas, ensemble, args))
    raw = filter_length(read_conllu(args.unlabelled), args.max_length or 10**9)
    sentences = [synth.strip(Corpus((s,)), args.task).sentences[0] for s in raw]
    charts = charts_for(args, ensemble, sentences, args.method)
    rows, scored = [], []
    for chart, gold in zip(charts, raw):
        has_gold = gold.has_tree if args.task == "parsing" else gold.has_tags
        st = metrics.chart_stats(chart, gold_structure(gold, args.task)) if has_gold else metrics.size_only_stats(chart)
        rows.append((gold.id, st))
        if has_gold:
            scored.append(st)
    _write_text(out / "charts.jsonl", "".join(c.dumps(s.id) + "\n" for c, s in zip(charts, sentences)))
    _write_text(out / "chart_stats.csv", metrics.stats_csv(rows))
    summary = metrics.summarize([st for _, st in rows])
    doc = dict(json.loads(metrics.summary_json(summary)))
    doc["method"], doc["sigma"], doc["alphas"] = args.method, args.sigma, list(ensemble.alphas)
    if not scored:
        doc["precision"] = doc["recall"] = None
    _write_json(out / "summary.json", doc)
    print(f"{args.method} charts for {len(charts)} sentences: median size {summary.median_size_total:g}")
    return 0


def cmd_transfer(args) -> int:
    if args.method not in TRANSFER_METHODS:
        raise UsageError(f"--method must be one of {TRANSFER_METHODS}")
    out = pathlib.Path(args.out)
    inputs = [args.unlabelled, *args.sources] + ([args.labelled] if args.labelled else [])
    write_manifest(out / "manifest.json", args, inputs)
    ensemble = EnsembleSpec(_load_sources(args.sources, args.task))
    ensemble = ensemble.with_alphas(_resolve_alphas(args.alphas, ensemble, args))
    config = _train_config(args, args.task)
    sentences = filter_length(_read_input(args.unlabelled, args.task), config.max_length)
    method = "mv-pseudo" if args.method == "mv" else args.method
    charts = charts_for(args, ensemble, sentences, method)
    result = train_target(ensemble, Corpus(tuple(sentences)), method, config, charts=charts)
    result.model.save(out / "model.json")
    _write_json(out / "history.json", {"loss": result.history, "alphas": list(ensemble.alphas)})
    print(f"trained {args.method} target model on {len(sentences)} sentences -> {out / 'model.json'}")
    return 0


def cmd_predict(args) -> int:
    write_manifest(_manifest_for_file(args.out), args, [args.model, args.input])
    model = ScoringModel.load(args.model)
    save_conllu(predict_corpus(model, _read_input(args.input, model.task)), args.out)
    print(f"wrote predictions to {args.out}")
    return 0


def cmd_mv_baseline(args) -> int:
    write_manifest(_manifest_for_file(args.out), args, [args.input, *args.sources])
    ensemble = EnsembleSpec(_load_sources(args.sources, args.task))
    save_conllu(mv_corpus(ensemble, _read_input(args.input, args.task)), args.out)
    print(f"wrote majority-vote predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    report = metrics.evaluate(read_conllu(args.pred), read_conllu(args.gold), args.task)
    if args.out:
        write_manifest(_manifest_for_file(args.out), args, [args.pred, args.gold])
        _write_json(pathlib.Path(args.out), report.to_dict())
    print(f"accuracy {round(report.accuracy, 6)} ({report.metric}, {report.correct}/{report.total})")
    return 0


def cmd_learn_alphas(args) -> int:
    write_manifest(_manifest_for_file(args.out), args, [args.labelled, *args.sources])
    ensemble = EnsembleSpec(_load_sources(args.sources, args.task))
    labelled = _sample(read_conllu(args.labelled), args.sample, args.seed)
    fit = learn_alphas(ensemble, labelled)
    _write_json(
        pathlib.Path(args.out),
        {"alphas": [float(a) for a in fit.alphas], "kl_history": list(fit.history), "sentences": len(labelled)},
    )
    print("alphas " + " ".join(f"{a:.6f}" for a in fit.alphas) + f" (KL {fit.history[0]:.6g} -> {fit.history[-1]:.6g})")
    return 0


def cmd_kl(args) -> int:
    ensemble = EnsembleSpec(_load_sources(args.sources, args.task))
    alphas = _resolve_alphas(args.alphas, ensemble, args)
    value = metrics.pool_kl(ensemble, alphas, read_conllu(args.labelled))
    print(f"kl {value:.12g}")
    return 0


# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eta", type=float, help="learning rate (default: per-task value)")
    p.add_argument("--lam", type=float, help="L2 strength towards the initial weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-length", type=int, help="drop longer sentences")
    p.add_argument("--seed", type=int, default=0)


def _add_ensemble_flags(p: argparse.ArgumentParser, sigma: bool = True) -> None:
    p.add_argument("--sources", nargs="+", help="source model files; the first is the initialiser")
    if sigma:
        p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
        p.add_argument("--alphas", default="uniform", help="uniform | learned | JSON file | comma list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pooltransfer", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flat option keys")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    def task_flag(p):
        p.add_argument("--task", choices=TASKS)

    p = command("synth", cmd_synth, "generate the synthetic benchmark")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-distant", type=int, default=2)
    p.add_argument("--n-noisy", type=int, default=1)
    p.add_argument("--close-size", type=int, default=200)
    p.add_argument("--distant-size", type=int, default=40)
    p.add_argument("--unlabelled-size", type=int, default=150)
    p.add_argument("--labelled-size", type=int, default=50)
    p.add_argument("--test-size", type=int, default=100)
    p.add_argument("--max-length", type=int, default=10)
    p.add_argument("--distant-divergence", type=float, default=0.3, help="share of retagged words in distant sources")
    p.add_argument("--noisy-divergence", type=float, default=0.5, help="share of retagged words in noisy sources")

    p = command("train-source", cmd_train_source, "train a supervised source model")
    task_flag(p)
    p.add_argument("--train")
    p.add_argument("--out")
    p.add_argument("--labels", help="comma-separated inventory (default: from the training data)")
    p.add_argument("--hash-dim", type=int, default=DEFAULT_HASH_DIM)
    p.add_argument("--hash-seed", type=int, default=DEFAULT_HASH_SEED)
    _add_train_flags(p)

    p = command("build-charts", cmd_build_charts, "build charts and chart statistics")
    task_flag(p)
    _add_ensemble_flags(p)
    p.add_argument("--method", default="lop")
    p.add_argument("--unlabelled")
    p.add_argument("--labelled", help="labelled target sample for --alphas learned")
    p.add_argument("--out")
    p.add_argument("--max-length", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir")

    p = command("transfer", cmd_transfer, "train a target model on charts")
    task_flag(p)
    _add_ensemble_flags(p)
    p.add_argument("--method", default="lop")
    p.add_argument("--unlabelled")
    p.add_argument("--labelled", help="labelled target sample for --alphas learned")
    p.add_argument("--out")
    p.add_argument("--cache-dir")
    _add_train_flags(p)

    p = command("predict", cmd_predict, "decode sentences with a model")
    p.add_argument("--model")
    p.add_argument("--input")
    p.add_argument("--out")

    p = command("evaluate", cmd_evaluate, "LAS or tag accuracy of predictions")
    task_flag(p)
    p.add_argument("--pred")
    p.add_argument("--gold")
    p.add_argument("--out", help="optional JSON report")

    p = command("learn-alphas", cmd_learn_alphas, "fit pool weights on labelled target sentences")
    task_flag(p)
    _add_ensemble_flags(p, sigma=False)
    p.add_argument("--labelled")
    p.add_argument("--sample", type=int, default=ALPHA_SAMPLE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = command("mv-baseline", cmd_mv_baseline, "majority-vote predictions of the sources")
    task_flag(p)
    _add_ensemble_flags(p, sigma=False)
    p.add_argument("--input")
    p.add_argument("--out")

    p = command("kl", cmd_kl, "KL from gold to the pooled source marginals")
    task_flag(p)
    _add_ensemble_flags(p, sigma=False)
    p.add_argument("--alphas", default="uniform", help="uniform | learned | JSON file | comma list")
    p.add_argument("--labelled")
    p.add_argument("--seed", type=int, default=0)
    return parser


REQUIRED = {
    "synth": ("out",),
    "train-source": ("task", "train", "out"),
    "build-charts": ("task", "sources", "unlabelled", "out"),
    "transfer": ("task", "sources", "unlabelled", "out"),
    "predict": ("model", "input", "out"),
    "evaluate": ("task", "pred", "gold"),
    "learn-alphas": ("task", "sources", "labelled", "out"),
    "mv-baseline": ("task", "sources", "input", "out"),
    "kl": ("task", "sources", "labelled"),
}


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    if args.config:
        try:
            values = json.loads(pathlib.Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(values, dict):
            sub.error("config file must hold a JSON object")
        values = {str(k).replace("-", "_"): v for k, v in values.items()}
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"command"})
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        values.pop("command", None)
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, [])]
    if missing:
        sub.error("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    sigma = getattr(args, "sigma", None)
    if sigma is not None and not 0.0 <= sigma <= 1.0:
        sub.error("--sigma must be in [0, 1]")
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pooltransfer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(f"pooltransfer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
