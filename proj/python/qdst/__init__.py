# SPDX-License-Identifier: Apache-2.0
"""Query-directed sparse transformer: pattern inspection, tokenization,
ranking metrics, and model scoring backed by the C++ core."""

try:
    from ._qdst import *  # noqa: F401,F403  (installed package layout)
except ImportError:
    from _qdst import *  # noqa: F401,F403  (in-tree build directory on PYTHONPATH)

__all__ = [
    "Model",
    "Vocabulary",
    "average_precision",
    "err",
    "mrr",
    "ndcg",
    "pattern_mask",
    "presets",
    "sparsity",
    "split_sentences",
    "tokenize",
    "tokenize_build",
    "word_split",
]
