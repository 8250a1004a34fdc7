# analysis_results.py
"""
Formatting of evaluation and experiment-matrix reports as fixed-width text:
a per-system WER table over the test sets plus sample wins and losses
between two systems with their token alignments.
"""

import logging
from typing import Callable, Dict, List, Optional

from utils.data_formatters import DataFormatter

logger = logging.getLogger(__name__)

SPLIT_TITLES = {"vs_like": "VS-like", "rare_tts": "Rare TTS", "rare_spoken": "Rare spoken"}


def _rule(width: int) -> str:
    return "=" * width


def format_wer_table(rows: List[Dict], splits=("vs_like", "rare_tts", "rare_spoken")) -> str:
    """One line per system: id, description, λ, then WER (%) per split."""
    header = f"{'ID':<4} {'System':<28} {'lambda':>8}" + "".join(f" {SPLIT_TITLES.get(s, s):>12}" for s in splits)
    lines = [header, "-" * len(header)]
    for row in rows:
        lam = row.get("lambda")
        if isinstance(lam, list):
            lam = lam[0] if len(set(lam)) == 1 and lam else None
        lam_text = "-" if lam is None else f"{lam:g}"
        cells = "".join(f" {DataFormatter.format_number(row['wer'].get(s), 'wer'):>12}" for s in splits)
        lines.append(f"{row['name']:<4} {DataFormatter.truncate_text(row['description'], 28):<28} {lam_text:>8}{cells}")
    return "\n".join(lines)


def format_win_loss(samples: List[Dict], namer: Optional[Callable[[int], str]] = None, limit: int = 10) -> str:
    if not samples:
        return "No wins or losses between the compared systems."
    lines = []
    for sample in samples[:limit]:
        lines.append(f"[{sample['split']}] {sample['utt_id']}  winner: {sample['winner']}")
        lines.append(f"  ref: {DataFormatter.format_tokens(sample['reference'], namer)}")
        lines.append(f"  A:   {DataFormatter.format_alignment(sample['alignment_a'], namer)}")
        lines.append(f"  B:   {DataFormatter.format_alignment(sample['alignment_b'], namer)}")
    return "\n".join(lines)


def format_eval_report(report: Dict, namer: Optional[Callable[[int], str]] = None) -> str:
    """Text report for a single evaluated checkpoint (an `EvalReport.to_dict()`)."""
    splits = report.get("splits", {})
    row = {"name": "-", "description": report.get("name", report.get("variant", "")),
           "lambda": report.get("lambda"), "wer": {s: v["wer"] for s, v in splits.items()}}
    text = [_rule(80), f"EVALUATION: {report.get('name')} ({report.get('variant')})", _rule(80),
            format_wer_table([row], tuple(splits) or ("vs_like",)), ""]
    for split, result in splits.items():
        text.append(f"{SPLIT_TITLES.get(split, split):<12} S={result['substitutions']} I={result['insertions']} "
                    f"D={result['deletions']} N={result['num_ref']} utts={result['num_utts']}")
    if report.get("lambda_scores"):
        grid = ", ".join(f"{k}: {DataFormatter.format_number(v, 'wer')}" for k, v in report["lambda_scores"].items())
        text.append(f"dev WER by lambda: {grid}")
    return "\n".join(text) + "\n"


def format_matrix_report(report: Dict, namer: Optional[Callable[[int], str]] = None,
                         baseline: str = "B5", candidate: str = "E1") -> str:
    """Table over all matrix rows (mean WER across seeds) plus win/loss samples."""
    rows = [{"name": r["name"], "description": r["description"], "lambda": r["lambda"], "wer": r["mean_wer"]}
            for r in report.get("rows", [])]
    text = [_rule(80), f"MODEL COMPARISON (mean over seeds {report.get('seeds')})", _rule(80), format_wer_table(rows)]
    by_name = {r["name"]: r for r in rows}
    if baseline in by_name and candidate in by_name:
        text.append("")
        for split in ("rare_tts", "rare_spoken"):
            base, cand = by_name[baseline]["wer"].get(split), by_name[candidate]["wer"].get(split)
            if base is not None and cand is not None:
                text.append(f"{candidate} vs {baseline} on {SPLIT_TITLES[split]}: "
                            f"{DataFormatter.format_relative_change(base, cand)}")
    text += ["", _rule(80), f"SAMPLE WINS AND LOSSES ({candidate} = A, {baseline} = B)", _rule(80),
             format_win_loss(report.get("win_loss", []), namer)]
    return "\n".join(text) + "\n"
