"""
Two-pass inference, WER scoring, λ selection and the experiment matrix.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from experiment_config import DecodeConfig, ExperimentConfig
from utils.task_pool import TaskPool

from .autodiff import no_grad
from .deliberation import DecoderState, DeliberationModel, SecondPassSources, interpolate
from .errors import DecodeError
from .rnnt import FirstPassResult, Hypothesis
from .toy_corpus import Corpus, Example

logger = logging.getLogger(__name__)

EVAL_SPLITS = ("vs_like", "rare_tts", "rare_spoken")
RARE_SPLITS = ("rare_tts", "rare_spoken")


# ========================================
# SECOND-PASS BEAM SEARCH
# ========================================

class _PrefixScorer:
    """Combined next-token log-probs per prefix, with both branch states cached."""

    def __init__(self, model: DeliberationModel, sources: SecondPassSources, lam: float):
        self.model = model
        self.sources = sources
        self.lam = lam
        self.use_lm = model.variant.is_jatd and lam < 1.0
        self.cache: Dict[Tuple[int, ...], Tuple[np.ndarray, DecoderState, Optional[DecoderState]]] = {}

    def __call__(self, prefix: Tuple[int, ...]) -> np.ndarray:
        if prefix not in self.cache:
            parent_acoustic, parent_lm = (None, None) if not prefix else self.cache[prefix[:-1]][1:]
            acoustic, acoustic_state = self.model.step_acoustic(self.sources, prefix, parent_acoustic)
            combined, lm_state = acoustic.data[0], None
            if self.use_lm:
                lm, lm_state = self.model.step_lm(self.sources, prefix, parent_lm)
                combined = interpolate(acoustic.data[0], lm.data[0], self.lam)
            self.cache[prefix] = (combined, acoustic_state, lm_state)
        return self.cache[prefix][0]


def _beam_pass(scorer: _PrefixScorer, width: int, labels: Sequence[int], eos_id: int,
               max_len: int) -> Dict[Tuple[int, ...], float]:
    """Label-synchronous search; finished prefixes map to scores including eos."""
    live: Dict[Tuple[int, ...], float] = {(): 0.0}
    finished: Dict[Tuple[int, ...], float] = {}
    while live:
        # every step adds a log-prob <= 0, so no live prefix can overtake this
        if finished and max(finished.values()) >= max(live.values()):
            break
        candidates: Dict[Tuple[int, ...], float] = {}
        for prefix, score in live.items():
            log_probs = scorer(prefix)
            end = score + float(log_probs[eos_id])
            if prefix not in finished or end > finished[prefix]:
                finished[prefix] = end
            if len(prefix) < max_len:
                for k in labels:
                    candidates[prefix + (k,)] = score + float(log_probs[k])
        ranked = sorted(candidates.items(), key=lambda item: (-item[1], item[0]))[:width]
        live = dict(ranked)
    return finished


def second_pass_search(model: DeliberationModel, sources: SecondPassSources, lam: float,
                       beam: int, max_output_length: int) -> List[Hypothesis]:
    """Ranked finished hypotheses; widths 1..beam are merged so wider never scores lower."""
    if beam < 1:
        raise DecodeError(f"second_beam must be >= 1, got {beam}")
    scorer = _PrefixScorer(model, sources, lam)
    labels = [k for k in range(model.vocab_size) if k not in (model.blank_id, model.eos_id)]
    merged: Dict[Tuple[int, ...], float] = {}
    for width in range(1, beam + 1):
        for tokens, score in _beam_pass(scorer, width, labels, model.eos_id, max_output_length).items():
            if tokens not in merged or score > merged[tokens]:
                merged[tokens] = score
    ranked = sorted(merged.items(), key=lambda item: (-item[1], item[0]))[:beam]
    return [Hypothesis(tokens, score) for tokens, score in ranked]


@dataclass
class DecodeRecord:
    utt_id: str
    reference: Tuple[int, ...]
    first_pass: Tuple[int, ...]
    first_pass_score: float
    hypothesis: Tuple[int, ...]
    score: float
    nbest: List[Tuple[Tuple[int, ...], float]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["nbest"] = [{"tokens": list(t), "score": s} for t, s in self.nbest]
        return values


def decode_example(example: Example, model: DeliberationModel, cfg: DecodeConfig,
                   lam: Optional[float] = None, first_pass_only: bool = False) -> DecodeRecord:
    if example.features is None or example.num_frames == 0:
        raise DecodeError(f"example {example.utt_id} has no audio to decode")
    lam = cfg.lambda_inference if lam is None else lam
    with no_grad():
        enc = model.rnnt.encode(example.features)
        first: FirstPassResult = model.rnnt.decode(enc, cfg.first_beam, cfg.max_symbols_per_frame)
        top = first.best if first.hyps else Hypothesis((), 0.0)
        if first_pass_only:
            return DecodeRecord(example.utt_id, tuple(example.transcript), top.tokens, top.score,
                                top.tokens, top.score, [(h.tokens, h.score) for h in first.hyps])
        hyps = first if first.hyps else FirstPassResult([top])
        sources = model.prepare(None, hyps, cfg.top_k, enc=enc)
        ranked = second_pass_search(model, sources, lam, cfg.second_beam, cfg.max_output_length)
    best = ranked[0]
    return DecodeRecord(example.utt_id, tuple(example.transcript), top.tokens, top.score,
                        best.tokens, best.score, [(h.tokens, h.score) for h in ranked])


def two_pass_decode(example: Example, model: DeliberationModel, cfg: DecodeConfig,
                    lam: Optional[float] = None) -> Hypothesis:
    record = decode_example(example, model, cfg, lam)
    return Hypothesis(record.hypothesis, record.score)


def decode_split(model: DeliberationModel, examples: Sequence[Example], cfg: DecodeConfig,
                 lam: Optional[float] = None, threads: int = 1, first_pass_only: bool = False) -> List[DecodeRecord]:
    records = TaskPool(threads).map(lambda e: decode_example(e, model, cfg, lam, first_pass_only), list(examples))
    return sorted(records, key=lambda r: r.utt_id)


# ========================================
# WER
# ========================================

@dataclass
class WerResult:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    num_ref: int
    num_utts: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def to_dict(self) -> Dict:
        return asdict(self)


def align_tokens(ref: Sequence[int], hyp: Sequence[int]) -> List[Tuple[str, Optional[int], Optional[int]]]:
    """Minimal-cost edit script as (op, ref_token, hyp_token) with op in ok/sub/ins/del.

    At equal cost the backtrace prefers substitution, then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j] + 1, dp[i, j - 1] + 1, dp[i - 1, j - 1] + cost)
    i, j, script = n, m, []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            script.append(("ok" if ref[i - 1] == hyp[j - 1] else "sub", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif j > 0 and dp[i, j] == dp[i, j - 1] + 1:
            script.append(("ins", None, hyp[j - 1]))
            j -= 1
        else:
            script.append(("del", ref[i - 1], None))
            i -= 1
    script.reverse()
    return script


def wer(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> WerResult:
    """Corpus-level token error rate from per-utterance alignments."""
    if len(refs) != len(hyps):
        raise DecodeError(f"{len(refs)} references but {len(hyps)} hypotheses")
    num_ref = sum(len(r) for r in refs)
    if num_ref == 0:
        raise DecodeError("references contain no tokens")
    counts = {"sub": 0, "ins": 0, "del": 0}
    for ref, hyp in zip(refs, hyps):
        for op, _, _ in align_tokens(ref, hyp):
            if op in counts:
                counts[op] += 1
    total = counts["sub"] + counts["ins"] + counts["del"]
    return WerResult(total / num_ref, counts["sub"], counts["ins"], counts["del"], num_ref, len(refs))


def records_wer(records: Sequence[DecodeRecord]) -> WerResult:
    return wer([r.reference for r in records], [r.hypothesis for r in records])


# ========================================
# λ SELECTION
# ========================================

def select_lambda(model: DeliberationModel, dev_set: Sequence[Example], grid: Sequence[float],
                  cfg: DecodeConfig, threads: int = 1) -> Tuple[float, Dict[float, float]]:
    """Grid value with the lowest dev WER; ties go to the smaller λ."""
    if not grid:
        raise DecodeError("lambda grid is empty")
    if not model.variant.is_jatd:
        logger.info(f"Variant {model.variant.value} has no fixed-context branch; using lambda=1")
        return 1.0, {}
    scores: Dict[float, float] = {}
    best = None
    for lam in sorted(float(v) for v in grid):
        scores[lam] = records_wer(decode_split(model, dev_set, cfg, lam, threads)).wer
        logger.info(f"lambda={lam}: dev WER {scores[lam]:.4f}")
        if best is None or scores[lam] < scores[best]:
            best = lam
    return best, scores


# ========================================
# REPORTS
# ========================================

@dataclass
class SplitReport:
    split: str
    result: WerResult
    records: List[DecodeRecord] = field(default_factory=list)


@dataclass
class EvalReport:
    name: str
    variant: str
    lam: float
    splits: Dict[str, SplitReport] = field(default_factory=dict)
    lambda_scores: Dict[float, float] = field(default_factory=dict)

    def wer(self, split: str) -> float:
        return self.splits[split].result.wer

    def rare_wer(self) -> float:
        present = [s for s in RARE_SPLITS if s in self.splits]
        return float(np.mean([self.wer(s) for s in present])) if present else float("nan")

    def to_dict(self, include_records: bool = False) -> Dict:
        data = {
            "name": self.name,
            "variant": self.variant,
            "lambda": self.lam,
            "lambda_scores": {str(k): v for k, v in self.lambda_scores.items()},
            "splits": {name: report.result.to_dict() for name, report in self.splits.items()},
        }
        if include_records:
            data["records"] = {name: [r.to_dict() for r in report.records] for name, report in self.splits.items()}
        return data


def evaluate_model(model: DeliberationModel, corpus: Corpus, cfg: DecodeConfig, name: Optional[str] = None,
                   threads: int = 1, first_pass_only: bool = False, lam: Optional[float] = None,
                   splits: Sequence[str] = EVAL_SPLITS) -> EvalReport:
    """Select λ on the dev split (when not given), then score every test split."""
    lambda_scores: Dict[float, float] = {}
    if first_pass_only:
        lam = 1.0
    elif lam is None:
        dev = corpus.splits.get("dev") or corpus.splits.get("vs_like", [])
        lam, lambda_scores = select_lambda(model, dev, cfg.lambda_grid, cfg, threads)
    report = EvalReport(name or model.variant.value, "rnnt" if first_pass_only else model.variant.value,
                        lam, lambda_scores=lambda_scores)
    for split in splits:
        examples = corpus.splits.get(split)
        if not examples:
            continue
        records = decode_split(model, examples, cfg, lam, threads, first_pass_only)
        report.splits[split] = SplitReport(split, records_wer(records), records)
        logger.info(f"{report.name} {split}: WER {report.splits[split].result.wer:.4f}")
    return report


@dataclass
class WinLoss:
    split: str
    utt_id: str
    winner: str
    reference: Tuple[int, ...]
    system_a: Tuple[int, ...]
    system_b: Tuple[int, ...]
    alignment_a: List[Tuple[str, Optional[int], Optional[int]]]
    alignment_b: List[Tuple[str, Optional[int], Optional[int]]]

    def to_dict(self) -> Dict:
        return asdict(self)


def win_loss_samples(a: EvalReport, b: EvalReport, split: str, limit: int = 10) -> List[WinLoss]:
    """Utterances where exactly one of the two systems is error-free."""
    if split not in a.splits or split not in b.splits:
        return []
    by_id = {r.utt_id: r for r in b.splits[split].records}
    samples = []
    for record_a in a.splits[split].records:
        record_b = by_id.get(record_a.utt_id)
        if record_b is None:
            continue
        a_correct = record_a.hypothesis == record_a.reference
        b_correct = record_b.hypothesis == record_b.reference
        if a_correct == b_correct:
            continue
        samples.append(WinLoss(split, record_a.utt_id, a.name if a_correct else b.name, record_a.reference,
                               record_a.hypothesis, record_b.hypothesis,
                               align_tokens(record_a.reference, record_a.hypothesis),
                               align_tokens(record_b.reference, record_b.hypothesis)))
    return samples[:limit]


# ========================================
# EXPERIMENT MATRIX
# ========================================

@dataclass(frozen=True)
class MatrixRow:
    name: str
    variant: Optional[str]
    training_data: str
    description: str

    @property
    def first_pass_only(self) -> bool:
        return self.variant is None


MATRIX_ROWS: Tuple[MatrixRow, ...] = (
    MatrixRow("B0", None, "paired", "RNN-T"),
    MatrixRow("B1", None, "mixed", "RNN-T mixed"),
    MatrixRow("B2", "las", "paired", "LAS"),
    MatrixRow("B3", "las", "mixed", "LAS mixed"),
    MatrixRow("B4", "las-jatd", "mixed", "LAS-JATD"),
    MatrixRow("B5", "deliberation", "paired", "Deliberation"),
    MatrixRow("B6", "deliberation", "mixed", "Deliberation mixed"),
    MatrixRow("E0", "delib-jatd-partial", "mixed", "Deliberation-JATD partial"),
    MatrixRow("E1", "delib-jatd-full", "mixed", "Deliberation-JATD full"),
)


def matrix_rows(names: Optional[Sequence[str]] = None) -> List[MatrixRow]:
    if not names:
        return list(MATRIX_ROWS)
    known = {row.name: row for row in MATRIX_ROWS}
    unknown = [n for n in names if n not in known]
    if unknown:
        raise DecodeError(f"unknown matrix rows {unknown}; expected {sorted(known)}")
    return [known[n] for n in names]


@dataclass
class MatrixReport:
    rows: List[MatrixRow]
    seeds: List[int]
    reports: Dict[str, List[EvalReport]] = field(default_factory=dict)
    win_loss: List[WinLoss] = field(default_factory=list)

    def mean_wer(self, row: str, split: str) -> float:
        values = [r.wer(split) for r in self.reports.get(row, []) if split in r.splits]
        return float(np.mean(values)) if values else float("nan")

    def mean_rare_wer(self, row: str) -> float:
        return float(np.mean([self.mean_wer(row, s) for s in RARE_SPLITS]))

    def to_dict(self) -> Dict:
        return {
            "seeds": list(self.seeds),
            "rows": [{
                "name": row.name,
                "description": row.description,
                "variant": row.variant or "rnnt",
                "training_data": row.training_data,
                "mean_wer": {s: self.mean_wer(row.name, s) for s in EVAL_SPLITS},
                "lambda": [r.lam for r in self.reports.get(row.name, [])],
                "per_seed": [r.to_dict() for r in self.reports.get(row.name, [])],
            } for row in self.rows],
            "win_loss": [w.to_dict() for w in self.win_loss],
        }


def run_experiment_matrix(corpus: Corpus, config: ExperimentConfig, rows: Optional[Sequence[str]] = None,
                          seeds: Sequence[int] = (0, 1, 2), baseline: str = "B5",
                          candidate: str = "E1") -> MatrixReport:
    """Train and evaluate each row for each seed.

    Second-pass rows start from one RNN-T per seed pretrained on paired data;
    B1 pretrains its own first pass on the mixed pool.
    """
    from .trainer import STAGE_SECOND_PASS, Trainer, copy_first_pass

    selected = matrix_rows(rows)
    report = MatrixReport(selected, list(seeds))
    cfg = config.decoding
    for seed in seeds:
        seeded = config.derive({"runtime.seed": int(seed)})
        base = Trainer(seeded, corpus, variant="deliberation", training_data="paired")
        base.run(second_pass=False)
        for row in selected:
            logger.info(f"Matrix row {row.name} ({row.description}), seed {seed}")
            trainer = Trainer(seeded, corpus, variant=row.variant or "deliberation",
                              training_data=row.training_data)
            if row.first_pass_only and row.training_data == "mixed":
                trainer.run(pretrain_data="mixed", second_pass=False)
            else:
                copy_first_pass(base.model, trainer.model)
                if not row.first_pass_only:
                    trainer.state.stage = STAGE_SECOND_PASS
                    trainer.train_second_pass()
            evaluation = evaluate_model(trainer.model, corpus, cfg, row.name, seeded.threads, row.first_pass_only)
            report.reports.setdefault(row.name, []).append(evaluation)
    names = {row.name for row in selected}
    if baseline in names and candidate in names:
        for split in ("rare_spoken", "rare_tts"):
            report.win_loss.extend(win_loss_samples(report.reports[candidate][0], report.reports[baseline][0], split))
    return report


def check_improvement(candidate: Dict, baseline: Dict) -> Tuple[bool, str]:
    """Strictly lower mean rare-set WER than the baseline report."""
    def rare(report: Dict) -> float:
        splits = report["splits"]
        return float(np.mean([splits[s]["wer"] for s in RARE_SPLITS if s in splits]))

    new, old = rare(candidate), rare(baseline)
    return new < old, f"rare-set WER {new:.4f} vs baseline {old:.4f}"


def check_matrix_acceptance(report: MatrixReport, candidate: str = "E1", paired: str = "B5",
                            mixed: str = "B6", common_tolerance: float = 0.05) -> Tuple[bool, List[str]]:
    """Directional comparison of seed-averaged WERs.

    The candidate must beat the paired-only baseline on every rare split,
    must not lose to the mixed baseline on the rare mean, and may lose at
    most `common_tolerance` relative on vs_like against the paired baseline.
    """
    missing = [name for name in (candidate, paired, mixed) if not report.reports.get(name)]
    if missing:
        return False, [f"matrix has no results for {missing}"]
    failures = []
    for split in RARE_SPLITS:
        new, old = report.mean_wer(candidate, split), report.mean_wer(paired, split)
        if not new < old:
            failures.append(f"{candidate} {split} WER {new:.4f} does not beat {paired} {old:.4f}")
    new, old = report.mean_rare_wer(candidate), report.mean_rare_wer(mixed)
    if not new <= old:
        failures.append(f"{candidate} rare-set WER {new:.4f} is worse than {mixed} {old:.4f}")
    new, old = report.mean_wer(candidate, "vs_like"), report.mean_wer(paired, "vs_like")
    if not new <= old * (1.0 + common_tolerance):
        failures.append(f"{candidate} vs_like WER {new:.4f} exceeds {paired} {old:.4f} "
                        f"by more than {common_tolerance:.0%}")
    return not failures, failures
