"""Command-line entry point: ``gbi-ppc <command> [options]``.

A run is configured by an optional JSON file with sections ``model``,
``mcmc``, ``selector`` and ``generator`` plus a top-level ``seed``; command
flags override it. Data outputs contain no timestamps; each command writes
its wall-clock time and arguments to ``<command>.meta.json`` instead.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import GeneratorConfig, generate_synthetic, load_corpus, save_corpus, save_truth
from .errors import ConfigError, CorpusError, NumericalError
from .evaluation import evaluate, write_eval, write_top_words
from .model import ModelConfig
from .ppc import run_ppc, write_ppc
from .sampler import (McmcConfig, convergence_summary, posterior_mean_probs, read_draws,
                      relabel_draws, sample_posterior, write_draws)
from .selector import SelectorConfig, read_report, select_lambda, write_report

log = logging.getLogger("gbi_ppc")

SECTIONS = {"seed", "model", "mcmc", "selector", "generator"}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(doc) - SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown config section(s) {sorted(unknown)}")
    return doc


def _build(cls, section: str, values: dict | None, **overrides):
    values = dict(values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"config section '{section}': unknown field(s) {sorted(unknown)}")
    if "leapfrog_steps" in values and isinstance(values["leapfrog_steps"], list):
        values["leapfrog_steps"] = tuple(values["leapfrog_steps"])
    if "grid" in values:
        values["grid"] = tuple(values["grid"])
    return cls(**values)


def _seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("a seed is required: pass --seed or set 'seed' in the config")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    return seed


def _model(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, "model", cfg.get("model"))


def _mcmc(cfg: dict, seed: int) -> McmcConfig:
    return _build(McmcConfig, "mcmc", cfg.get("mcmc"), seed=seed)


def _write_meta(out_dir: Path, command: str, args, cfg: dict) -> None:
    meta = {
        "command": command,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
        "argv": sys.argv[1:],
        "config": cfg,
        "seed": args.seed,
    }
    (out_dir / f"{command}.meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def cmd_simulate(args, cfg: dict, out_dir: Path) -> None:
    gen = _build(GeneratorConfig, "generator", cfg.get("generator"), seed=_seed(args, cfg))
    corpus, truth = generate_synthetic(gen)
    save_corpus(corpus, out_dir / "corpus.json")
    save_truth(truth, out_dir / "truth.json")
    log.info("wrote %d snippets to %s", len(corpus), out_dir / "corpus.json")


def cmd_fit(args, cfg: dict, out_dir: Path) -> None:
    corpus = load_corpus(args.corpus)
    model = _model(cfg)
    mcmc = _mcmc(cfg, _seed(args, cfg))
    draws = relabel_draws(sample_posterior(corpus, model, args.lam, mcmc, jobs=args.jobs))
    name = args.output or f"lambda_{args.lam:.4f}.draws.jsonl"
    write_draws(out_dir / name, draws, model, mcmc)
    if draws.num_chains >= 2 and mcmc.num_draws >= 4:
        summary = convergence_summary(draws)
        for w in summary.warnings:
            log.warning(w)
        (out_dir / f"{Path(name).stem}.convergence.json").write_text(
            json.dumps(summary.as_dict(), indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d draws to %s", len(draws), out_dir / name)


def cmd_ppc(args, cfg: dict, out_dir: Path) -> None:
    corpus = load_corpus(args.corpus)
    draws, _ = read_draws(args.draws)
    if not draws.relabeled:
        draws = relabel_draws(draws)
    result = run_ppc(corpus, draws, _seed(args, cfg))
    write_ppc(result, out_dir / "ppc.json", out_dir / "ppc.csv")
    log.info("p_mean=%.3f p_paired=%.3f p_avg=%.3f", result.p_mean, result.p_paired, result.p_avg)


def cmd_select(args, cfg: dict, out_dir: Path) -> None:
    corpus = load_corpus(args.corpus)
    seed = _seed(args, cfg)
    sel = _build(SelectorConfig, "selector", cfg.get("selector"), mcmc=_mcmc(cfg, seed))
    report = select_lambda(corpus, _model(cfg), sel, out_dir=out_dir, jobs=args.jobs)
    write_report(report, out_dir / "report.json", out_dir / "report.csv")
    log.info("selected lambda: %s", report.selected)


def cmd_score(args, cfg: dict, out_dir: Path) -> None:
    corpus = load_corpus(args.corpus)
    if not corpus.has_labels:
        raise CorpusError(f"{args.corpus}: scoring requires true sense labels "
                          "('label' per snippet and 'num_true_senses')")
    draws, _ = read_draws(args.draws)
    if not draws.relabeled:
        draws = relabel_draws(draws)
    sel = _build(SelectorConfig, "selector", cfg.get("selector"))
    report = evaluate(corpus, draws, sel.collapse_threshold)
    write_eval(report, out_dir / "score.json", out_dir / "score_probs.csv")
    V = corpus.vocab_size
    write_top_words(posterior_mean_probs(draws), min(args.top_words, V), out_dir / "top_words.csv")
    log.info("brier=%s collapsed=%s", report.brier, report.collapsed)


def cmd_report(args, cfg: dict, out_dir: Path) -> None:
    report = read_report(args.report)
    briers = {r.lam: r.brier for r in report.records if r.brier is not None}
    best = min(briers, key=lambda lam: (briers[lam], lam)) if briers else None

    def fmt(v):
        if v is None:
            return ""
        return str(v).lower() if isinstance(v, bool) else repr(float(v))

    rows = sorted(report.records, key=lambda r: r.lam)
    with open(out_dir / "report_combined.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "p_mean", "p_paired", "p_avg", "brier", "collapsed", "selected",
                    "brier_optimal", "error"])
        for r in rows:
            w.writerow([fmt(r.lam), fmt(r.p_mean), fmt(r.p_paired), fmt(r.p_avg), fmt(r.brier),
                        fmt(r.collapsed), fmt(r.lam == report.selected), fmt(r.lam == best),
                        r.error or ""])
    with open(out_dir / "p_vs_lambda.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "estimator", "p_value"])
        for r in rows:
            for name in ("p_mean", "p_paired", "p_avg"):
                if getattr(r, name) is not None:
                    w.writerow([fmt(r.lam), name, fmt(getattr(r, name))])
    with open(out_dir / "brier_vs_lambda.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "brier"])
        for r in rows:
            if r.brier is not None:
                w.writerow([fmt(r.lam), fmt(r.brier)])


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "ppc": cmd_ppc,
    "select": cmd_select,
    "score": cmd_score,
    "report": cmd_report,
}


def _global_flags(parser: argparse.ArgumentParser, defaults: bool) -> None:
    # Subcommands repeat the global flags; their copies must not reset values
    # given before the subcommand name, hence SUPPRESS there.
    def d(value):
        return value if defaults else argparse.SUPPRESS

    parser.add_argument("--config", default=d(None), help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=d(None), help="base seed (overrides the config)")
    parser.add_argument("--out-dir", default=d("."), help="output directory (default: .)")
    parser.add_argument("--jobs", type=int, default=d(1), help="worker processes (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, defaults=False)

    parser = argparse.ArgumentParser(prog="gbi-ppc",
                                     description="Learning-rate selection for tempered "
                                                 "sense-mixture posteriors by predictive checks.")
    _global_flags(parser, defaults=True)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate a synthetic labelled corpus")

    p = sub.add_parser("fit", parents=[common], help="sample the tempered posterior at one rate")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--output", help="draw file name inside --out-dir")

    p = sub.add_parser("ppc", parents=[common], help="posterior predictive check of a draw file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--draws", required=True)

    p = sub.add_parser("select", parents=[common], help="sweep the rate grid and select a rate")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("score", parents=[common], help="Brier score against true labels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--draws", required=True)
    p.add_argument("--top-words", type=int, default=10)

    p = sub.add_parser("report", parents=[common], help="plot-ready CSVs from a selection report")
    p.add_argument("--report", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        cfg = load_config(args.config)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out_dir)
        _write_meta(out_dir, args.command, args, cfg)
    except ConfigError as exc:
        print(f"gbi-ppc: configuration error: {exc}", file=sys.stderr)
        return 2
    except CorpusError as exc:
        print(f"gbi-ppc: data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"gbi-ppc: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, TypeError) as exc:
        print(f"gbi-ppc: invalid input: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
