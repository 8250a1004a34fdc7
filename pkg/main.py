"""
Main entry point for the Deliberation-JATD toolkit.

Subcommands:
    gen-data   build the toy corpus
    train      pretrain the first pass and train a second-pass variant
    eval       select λ on dev and score every test split
    verify     run a property suite
    matrix     train and evaluate the full comparison table over several seeds

Exit codes: 0 success, 1 assertion/acceptance failure, 2 usage error.
"""

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, List, Optional

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from analysis_results import format_eval_report, format_matrix_report  # noqa: E402
from experiment_config import ExperimentConfig  # noqa: E402
from modules.errors import ConfigError, DeliberationError  # noqa: E402
from utils.data_exporters import DataExporter  # noqa: E402
from utils.data_formatters import DataFormatter  # noqa: E402

logger = logging.getLogger("main")

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

MANIFEST_FILE = "manifest.json"
DECODE_CSV_FIELDS = ["split", "utt_id", "reference", "first_pass", "hypothesis", "score"]


class UsageError(Exception):
    pass


# ========================================
# RUN MANIFEST
# ========================================

def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    config: Dict
    seed: int
    build_id: str
    started_at: str = field(default_factory=lambda: datetime.now().isoformat())
    finished_at: Optional[str] = None
    extra: Dict = field(default_factory=dict)

    def write(self, out_dir: str) -> bool:
        self.finished_at = datetime.now().isoformat()
        return DataExporter.export_to_json(asdict(self), os.path.join(out_dir, MANIFEST_FILE))


def start_manifest(command: str, args, config: ExperimentConfig) -> RunManifest:
    return RunManifest(command, args.config, config.to_dict(), config.seed, build_id())


# ========================================
# HELPERS
# ========================================

def _parse_grid(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lambda-grid must be comma-separated numbers, got {text!r}") from None


def load_config(args) -> ExperimentConfig:
    """Resolve defaults < config file < DJTD_SEED < command-line flags."""
    beam1 = getattr(args, "beam1", None)
    top_k = getattr(args, "top_k", None)
    overrides = {
        "runtime.seed": getattr(args, "seed", None),
        "runtime.threads": getattr(args, "threads", None),
        "model.variant": getattr(args, "variant", None),
        "training.lambda_train": getattr(args, "lambda_train", None),
        "training.freeze_first_pass": getattr(args, "freeze_first_pass", None),
        "training.first_beam": beam1,
        "training.top_k": top_k,
        "decoding.first_beam": beam1,
        "decoding.second_beam": getattr(args, "beam2", None),
        "decoding.top_k": top_k,
        "decoding.lambda_grid": _parse_grid(getattr(args, "lambda_grid", None)),
    }
    config = ExperimentConfig(args.config, overrides)
    errors = config.validate()
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return config


def prepare_out_dir(path: str, force: bool):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


def open_corpus(corpus_dir: str, config: ExperimentConfig):
    """Load a corpus with the corpus settings and seed it was generated with."""
    from experiment_config import CorpusConfig
    from modules.toy_corpus import load_corpus

    manifest_path = os.path.join(corpus_dir, MANIFEST_FILE)
    cfg, seed = config.corpus, config.seed
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        cfg = CorpusConfig.from_dict(manifest["config"]["corpus"])
        seed = int(manifest["seed"])
    elif not os.path.isdir(corpus_dir):
        raise UsageError(f"corpus directory not found: {corpus_dir}")
    return load_corpus(corpus_dir, cfg, seed)


# ========================================
# COMMANDS
# ========================================

def cmd_gen_data(args) -> int:
    from modules.toy_corpus import build_corpus, save_corpus

    config = load_config(args)
    prepare_out_dir(args.out, args.force)
    manifest = start_manifest("gen-data", args, config)
    corpus = build_corpus(config.corpus, config.seed, config.threads)
    save_corpus(corpus, args.out, text_dump=args.format == "text")
    manifest.extra = {"counts": corpus.counts()}
    manifest.write(args.out)
    logger.info(f"Corpus written to {args.out}: {corpus.counts()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from modules.trainer import Trainer

    config = load_config(args)
    corpus = open_corpus(args.corpus, config)
    os.makedirs(args.out, exist_ok=True)
    manifest = start_manifest("train", args, config)
    trainer = Trainer(config, corpus, args.out)
    if args.force:
        logger.info(f"Discarding checkpoints in {args.out}")
        trainer.saver.clear()
    trainer.run(init_from=args.init_from)
    manifest.extra = {"corpus": args.corpus, "init_from": args.init_from, "variant": trainer.model.variant.value,
                      "num_params": trainer.model.num_params()}
    manifest.write(args.out)
    logger.info(f"Model saved to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from modules.decode_eval import check_improvement, evaluate_model
    from modules.trainer import load_model

    config = load_config(args)
    corpus = open_corpus(args.corpus, config)
    model = load_model(args.checkpoint)
    report = evaluate_model(model, corpus, config.decoding, args.name, config.threads,
                            first_pass_only=args.first_pass_only)
    data = report.to_dict()
    out_dir = args.report_out or os.path.join(args.checkpoint, "eval")
    DataExporter.export_to_json(data, os.path.join(out_dir, "report.json"))
    DataExporter.export_jsonl((r.to_dict() for split in report.splits.values() for r in split.records),
                              os.path.join(out_dir, "decodes.jsonl"))
    DataExporter.export_records_to_csv([dict(r.to_dict(), split=name) for name, split in report.splits.items()
                                        for r in split.records],
                                       os.path.join(out_dir, "decodes.csv"), DECODE_CSV_FIELDS)
    text = format_eval_report(data, corpus.vocab.name)
    DataExporter.export_text_table(text, os.path.join(out_dir, "report.txt"))
    print(text)
    manifest = start_manifest("eval", args, config)
    manifest.extra = {"checkpoint": args.checkpoint, "corpus": args.corpus, "lambda": report.lam}
    manifest.write(out_dir)
    if args.assert_improvement:
        with open(args.assert_improvement, "r", encoding="utf-8") as f:
            baseline = json.load(f)
        improved, message = check_improvement(data, baseline)
        logger.info(message)
        if not improved:
            logger.error("Rare-set WER did not improve on the baseline")
            return EXIT_FAILURE
    return EXIT_OK


def cmd_verify(args) -> int:
    from modules.verify import SUITES, run_suite

    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        result = run_suite(name, args.seed or 0)
        print(result.summary())
        for check in result.checks:
            print(f"  [{'PASS' if check.passed else 'FAIL'}] {check.name} {check.detail}".rstrip())
        ok = ok and result.passed
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_matrix(args) -> int:
    from modules.decode_eval import check_matrix_acceptance, run_experiment_matrix

    config = load_config(args)
    corpus = open_corpus(args.corpus, config)
    prepare_out_dir(args.out, args.force)
    manifest = start_manifest("matrix", args, config)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = args.rows.split(",") if args.rows else None
    report = run_experiment_matrix(corpus, config, rows, seeds)
    data = report.to_dict()
    DataExporter.export_to_json(data, os.path.join(args.out, "matrix.json"))
    text = format_matrix_report(data, corpus.vocab.name)
    DataExporter.export_text_table(text, os.path.join(args.out, "matrix.txt"))
    print(text)
    manifest.extra = {"corpus": args.corpus, "seeds": seeds, "rows": [r.name for r in report.rows]}
    manifest.write(args.out)
    if args.assert_improvement:
        accepted, failures = check_matrix_acceptance(report)
        for failure in failures:
            logger.error(failure)
        if not accepted:
            return EXIT_FAILURE
    return EXIT_OK


# ========================================
# ARGUMENT PARSING
# ========================================

def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config merged over the defaults")
    parser.add_argument("--seed", type=int, help="global seed (overrides DJTD_SEED and the config)")
    parser.add_argument("--threads", type=int, help="worker cap for parallel generation/decoding")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def _decoding(parser: argparse.ArgumentParser):
    parser.add_argument("--beam1", type=int, help="first-pass beam width")
    parser.add_argument("--beam2", type=int, help="second-pass beam width")
    parser.add_argument("--top-k", type=int, help="first-pass hypotheses attended by the second pass")
    parser.add_argument("--lambda-grid", help="comma-separated inference λ grid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="djtd", description="Deliberation-JATD two-pass ASR toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate the toy corpus")
    _common(gen)
    gen.add_argument("--out", required=True)
    gen.add_argument("--force", action="store_true")
    gen.add_argument("--format", choices=["binary", "text"], default="binary",
                     help="'text' also dumps transcripts one per line")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="train a model")
    _common(train)
    train.add_argument("--corpus", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--variant", choices=["las", "las-jatd", "deliberation", "delib-jatd-partial",
                                             "delib-jatd-full"])
    train.add_argument("--lambda-train", type=float)
    train.add_argument("--freeze-first-pass", action=argparse.BooleanOptionalAction, default=None)
    train.add_argument("--beam1", type=int)
    train.add_argument("--top-k", type=int)
    train.add_argument("--init-from", help="checkpoint directory whose first pass is reused (skips stage 1)")
    train.add_argument("--force", action="store_true", help="discard existing checkpoints instead of resuming")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(evaluate)
    _decoding(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--corpus", required=True)
    evaluate.add_argument("--name", help="row name in the report")
    evaluate.add_argument("--first-pass-only", action="store_true", help="score the RNN-T output alone")
    evaluate.add_argument("--report-out", help="directory for report.json/report.txt")
    evaluate.add_argument("--assert-improvement", metavar="BASELINE_REPORT",
                          help="exit 1 unless rare-set WER beats this report.json")
    evaluate.set_defaults(func=cmd_eval)

    verify = sub.add_parser("verify", help="run a property suite")
    verify.add_argument("--suite", required=True,
                        choices=["gradcheck", "rnnt-oracle", "gating", "interp", "beam-oracle", "all"])
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--verbose", action="store_true")
    verify.set_defaults(func=cmd_verify)

    matrix = sub.add_parser("matrix", help="train and evaluate the comparison table")
    _common(matrix)
    _decoding(matrix)
    matrix.add_argument("--corpus", required=True)
    matrix.add_argument("--out", required=True)
    matrix.add_argument("--force", action="store_true")
    matrix.add_argument("--rows", help="comma-separated row ids (default: all of B0-B6, E0, E1)")
    matrix.add_argument("--seeds", default="0,1,2")
    matrix.add_argument("--assert-improvement", action="store_true",
                        help="exit 1 unless E1 beats B5 on both rare sets, matches B6 on their mean "
                             "and stays within 5%% of B5 on vs_like")
    matrix.set_defaults(func=cmd_matrix)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    started = time.monotonic()
    try:
        code = args.func(args)
        logger.info(f"{args.command} finished in {DataFormatter.format_duration(time.monotonic() - started)}")
        return code
    except (ConfigError, UsageError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except DeliberationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
