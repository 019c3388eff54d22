"""Command-line entry point: gen-data, train, eval, baseline, ablate."""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dataset import FormatError, generate_synthetic_corpus, load_corpus, save_corpus
from .evaluation import (NetworkPredictor, evaluate, evaluate_baseline, write_details_csv,
                         write_report_csv)
from .graphs import build_adjacency_set
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .proposals import read_proposal_file
from .training import TrainingDiverged, build_model, train, write_history

log = logging.getLogger("mgfusion")

ABLATION_LAYERS = (1, 2, 3)
ABLATION_GRAPHS = (1, 2, 3)


class CommandError(RuntimeError):
    pass


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        config.set(key, value)
    if args.seed is not None:
        config.set("dataset.seed" if args.command == "gen-data" else "train.seed", str(args.seed))
    if args.out is not None:
        config.run.out = args.out
    if getattr(args, "corpus", None):
        config.run.corpus = args.corpus
    if getattr(args, "checkpoint", None):
        config.run.checkpoint = args.checkpoint
    if args.variant is not None:
        config.model.variant = args.variant
    if args.thresholds is not None:
        config.set("eval.thresholds", args.thresholds)
    if args.baseline is not None:
        config.eval.baseline = args.baseline
    if args.epochs is not None:
        config.train.epochs = args.epochs
    config.validate()
    return config


def write_resolved(config: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.dumps())


def _load_corpus(config: RunConfig):
    if not config.run.corpus:
        raise CommandError("no corpus given (run.corpus or --corpus)")
    path = Path(config.run.corpus)
    if not path.exists():
        raise CommandError(f"corpus not found: {path}")
    return load_corpus(path)


def _adjacency(config: RunConfig):
    if config.model.variant == "cnn":
        return None
    return build_adjacency_set(config.train.T, config.train.ks)


def _metadata(config: RunConfig, corpus) -> dict:
    return {"config_hash": config.digest(), "seed": config.train.seed, "corpus_id": corpus.fingerprint()}


def _external_proposals(config: RunConfig):
    return read_proposal_file(config.eval.proposals_file) if config.eval.proposals_file else None


def cmd_gen_data(config: RunConfig) -> None:
    out = Path(config.run.out)
    corpus = generate_synthetic_corpus(config.dataset)
    save_corpus(corpus, out)
    config.run.corpus = str(out / "manifest.txt")
    write_resolved(config, out)
    log.info("wrote %d videos to %s", len(corpus.videos), out)


def train_into(config: RunConfig, corpus, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    result = train(config.train, corpus, config.model, out_dir=out)
    save_checkpoint(result.model, out / "checkpoint.txt")
    write_history(result.history, out / "loss_history.csv")
    return result


def cmd_train(config: RunConfig) -> None:
    corpus = _load_corpus(config)
    out = Path(config.run.out)
    write_resolved(config, out)
    result = train_into(config, corpus, out)
    first, last = result.history[0], result.history[-1]
    log.info("triplet loss %.4f -> %.4f over %d epochs", first[1], last[1], last[0])


def write_reports(reports: dict, out: Path) -> None:
    """Per-method report/detail CSVs plus a combined method,threshold,map summary."""
    summary = ["method,threshold,map"]
    for method, report in reports.items():
        suffix = "" if method == "model" else f"_{method}"
        write_report_csv(report, out / f"report{suffix}.csv")
        write_details_csv(report, out / f"details{suffix}.csv")
        summary += [f"{method},{t!r},{v!r}" for t, v in zip(report.thresholds, report.map_values)]
    (out / "summary.csv").write_text("\n".join(summary) + "\n")


def run_baselines(config: RunConfig, corpus, methods, meta) -> dict:
    reports = {}
    for method in methods:
        rng = np.random.default_rng(config.train.seed)
        reports[method] = evaluate_baseline(
            corpus, method, config.eval.thresholds, rng, config.train.window_fractions,
            config.train.stride_fraction, _external_proposals(config), metadata=meta)
    return reports


def evaluate_model(config: RunConfig, corpus, model, meta):
    predictor = NetworkPredictor(model, _adjacency(config), config.train.T)
    return evaluate(corpus, predictor, config.eval.thresholds, config.train.window_fractions,
                    config.train.stride_fraction, _external_proposals(config), metadata=meta)


def cmd_eval(config: RunConfig) -> None:
    corpus = _load_corpus(config)
    out = Path(config.run.out)
    ckpt = Path(config.run.checkpoint) if config.run.checkpoint else out / "checkpoint.txt"
    if not ckpt.exists():
        raise CommandError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(build_model(config.train, corpus.dim, config.model), ckpt)
    write_resolved(config, out)
    meta = _metadata(config, corpus)
    reports = {"model": evaluate_model(config, corpus, model, meta)}
    if config.eval.baseline != "none":
        reports.update(run_baselines(config, corpus, [config.eval.baseline], meta))
    write_reports(reports, out)
    (out / "report_meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))


def cmd_baseline(config: RunConfig) -> None:
    corpus = _load_corpus(config)
    out = Path(config.run.out)
    write_resolved(config, out)
    methods = ["chance", "frame"] if config.eval.baseline == "none" else [config.eval.baseline]
    write_reports(run_baselines(config, corpus, methods, _metadata(config, corpus)), out)


def cmd_ablate(config: RunConfig) -> None:
    """Train and evaluate every (layers n, graph count k) cell; k graphs means strides 1..k."""
    corpus = _load_corpus(config)
    out = Path(config.run.out)
    write_resolved(config, out)
    rows = ["n,k," + ",".join(f"map@{t!r}" for t in config.eval.thresholds)]
    for n in ABLATION_LAYERS:
        for k in ABLATION_GRAPHS:
            cell = copy.deepcopy(config)
            cell.train.L = n
            cell.train.ks = tuple(range(1, k + 1))
            cell_out = out / f"n{n}_k{k}"
            cell.run.out = str(cell_out)
            write_resolved(cell, cell_out)
            result = train_into(cell, corpus, cell_out)
            report = evaluate_model(cell, corpus, result.model, _metadata(cell, corpus))
            write_reports({"model": report}, cell_out)
            rows.append(f"{n},{k}," + ",".join(repr(v) for v in report.map_values))
            log.info("ablation n=%d k=%d map@%s=%.4f", n, k, report.thresholds[0], report.map_values[0])
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--variant", choices=("graph", "cnn"))
        p.add_argument("--thresholds", metavar="CSV", help="e.g. 0.5,0.7,0.9")
        p.add_argument("--baseline", choices=("chance", "frame", "none"))
        p.add_argument("--corpus", metavar="PATH", help="corpus manifest or directory")
        p.add_argument("--checkpoint", metavar="PATH")
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](config)
    except (ConfigError, CommandError, FormatError, CheckpointError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
