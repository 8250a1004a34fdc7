"""
Data formatting utilities
"""

from typing import Callable, Optional, Sequence, Union


class DataFormatter:
    """Formats numbers, token sequences and alignments for display."""

    @staticmethod
    def format_number(number: Union[int, float], format_type: str = "default") -> str:
        if not isinstance(number, (int, float)):
            return "-"
        if format_type == "wer":
            return f"{100.0 * number:.1f}"
        if format_type == "percentage":
            return f"{number:.2f}%"
        if format_type == "loss":
            return f"{number:.4f}"
        if isinstance(number, float):
            return f"{number:,.4g}"
        return f"{number:,}"

    @staticmethod
    def format_relative_change(baseline: float, value: float) -> str:
        """Relative WER reduction against a baseline, e.g. '22.5% rel.'."""
        if baseline <= 0:
            return "n/a"
        return f"{100.0 * (baseline - value) / baseline:.1f}% rel."

    @staticmethod
    def format_duration(seconds: float) -> str:
        seconds = max(0.0, float(seconds))
        minutes, secs = divmod(int(round(seconds)), 60)
        hours, minutes = divmod(minutes, 60)
        if hours:
            return f"{hours}:{minutes:02d}:{secs:02d}"
        return f"{minutes}:{secs:02d}"

    @staticmethod
    def format_tokens(tokens: Sequence[int], namer: Optional[Callable[[int], str]] = None) -> str:
        if not tokens:
            return "<empty>"
        namer = namer or str
        return " ".join(namer(t) for t in tokens)

    @staticmethod
    def format_alignment(alignment: Sequence[tuple], namer: Optional[Callable[[int], str]] = None) -> str:
        """One column per alignment step; errors are upper-cased op tags."""
        namer = namer or str
        cells = []
        for op, ref, hyp in alignment:
            if op == "ok":
                cells.append(namer(ref))
            elif op == "sub":
                cells.append(f"{namer(ref)}->{namer(hyp)}")
            elif op == "ins":
                cells.append(f"+{namer(hyp)}")
            else:
                cells.append(f"-{namer(ref)}")
        return " ".join(cells)

    @staticmethod
    def truncate_text(text: str, max_length: int = 100, suffix: str = "...") -> str:
        if not text or len(text) <= max_length:
            return text
        return text[:max_length - len(suffix)] + suffix

