# modules/__init__.py

"""
Two-pass speech recognition modules: autodiff core, layers, toy corpus,
RNN-T first pass, deliberation / JATD second pass, training and evaluation.

Submodules are imported directly (``from modules.rnnt import RnntModel``);
nothing is re-exported here so that configuration can import the error
types without pulling in the model code.
"""

__all__ = [
    'autodiff',
    'checkpoint',
    'decode_eval',
    'deliberation',
    'errors',
    'layers',
    'rnnt',
    'toy_corpus',
    'trainer',
    'verify',
]
