"""
Data export utilities
"""

import csv
import json
import logging
import os
from typing import Dict, Iterable, List, Sequence

logger = logging.getLogger(__name__)


def _ensure_parent(filename: str):
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)


class DataExporter:
    """Handles report, metrics and decode-record export."""

    @staticmethod
    def export_to_json(data: dict, filename: str) -> bool:
        """Export data to JSON file."""
        try:
            _ensure_parent(filename)
            with open(filename, "w", encoding="utf-8") as f:
                json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True, default=str)
            logger.info(f"Data exported to JSON: {filename}")
            return True
        except (OSError, TypeError, ValueError) as e:
            logger.error(f"Error exporting to JSON: {e}")
            return False

    @staticmethod
    def append_jsonl(record: dict, filename: str) -> bool:
        """Append one JSON object as a line."""
        try:
            _ensure_parent(filename)
            with open(filename, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True, default=str) + "\n")
            return True
        except (OSError, TypeError, ValueError) as e:
            logger.error(f"Error appending to {filename}: {e}")
            return False

    @staticmethod
    def export_jsonl(records: Iterable[dict], filename: str) -> bool:
        """Write records as JSON lines, replacing the file."""
        try:
            _ensure_parent(filename)
            with open(filename, "w", encoding="utf-8") as f:
                for record in records:
                    f.write(json.dumps(record, sort_keys=True, default=str) + "\n")
            logger.info(f"Records exported to JSON lines: {filename}")
            return True
        except (OSError, TypeError, ValueError) as e:
            logger.error(f"Error exporting JSON lines: {e}")
            return False

    @staticmethod
    def export_text_lines(lines: Iterable[str], filename: str) -> bool:
        try:
            _ensure_parent(filename)
            with open(filename, "w", encoding="utf-8") as f:
                for line in lines:
                    f.write(f"{line}\n")
            return True
        except OSError as e:
            logger.error(f"Error exporting text: {e}")
            return False

    @staticmethod
    def export_text_table(content: str, filename: str) -> bool:
        """Write an already formatted report."""
        try:
            _ensure_parent(filename)
            with open(filename, "w", encoding="utf-8") as f:
                f.write(content)
            logger.info(f"Report exported: {filename}")
            return True
        except OSError as e:
            logger.error(f"Error exporting report: {e}")
            return False

    @staticmethod
    def export_records_to_csv(records: Sequence[Dict], filename: str, fieldnames: List[str]) -> bool:
        """Export flat per-utterance decode records to CSV."""
        try:
            _ensure_parent(filename)
            with open(filename, "w", newline="", encoding="utf-8") as f:
                writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
                writer.writeheader()
                for record in records:
                    writer.writerow({k: (" ".join(map(str, v)) if isinstance(v, (list, tuple)) else v)
                                     for k, v in record.items()})
            logger.info(f"Records exported to CSV: {filename}")
            return True
        except OSError as e:
            logger.error(f"Error exporting to CSV: {e}")
            return False

    @staticmethod
    def read_jsonl(filename: str) -> List[dict]:
        records = []
        try:
            with open(filename, "r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        records.append(json.loads(line))
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error reading {filename}: {e}")
        return records
