"""Desk-scale Chinese medical dialogue toolkit.

Subpackages cover the full pipeline: corpus handling, a character tokenizer,
a transformer encoder with masked-token pretraining, supervised and
prompt-based triage classifiers, a knowledge-graph-supplemented consultation
generator, and a generation-metric suite, all on a small autodiff core.
"""

__version__ = "0.1.0"
