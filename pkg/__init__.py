# Root __init__.py
"""
Deliberation-JATD - two-pass speech recognition with joint acoustic and text
decoding, trained and evaluated on a synthetic rare-word corpus.
"""

__version__ = "0.1.0"
__description__ = "Deliberation-JATD two-pass ASR toolkit"
__license__ = "MIT"


def main(argv=None) -> int:
    """Main entry point for the command-line tool."""
    import os
    import sys

    sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
    from main import main as cli_main
    return cli_main(argv)


if __name__ == "__main__":
    raise SystemExit(main())
