"""Similarity-graph regularized optimal transport over precomputed embeddings.

Balanced/unbalanced entropic Sinkhorn solvers with exact unrolled gradients,
contrastive and transport-alignment losses, a deterministic projection-head
trainer, retrieval metrics, and a small CLI.
"""

import os as _os

# Cap BLAS parallelism before numpy loads so reductions stay reproducible.
# Respect existing explicit settings; SIGROT_THREADS overrides the default of 1.
_threads = _os.environ.get("SIGROT_THREADS", "1")
for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import data, errors, evaluation, graph, losses, numerics, ot, training  # noqa: E402

__all__ = [
    "__version__",
    "data",
    "errors",
    "evaluation",
    "graph",
    "losses",
    "numerics",
    "ot",
    "training",
]
