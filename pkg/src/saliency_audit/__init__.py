"""Gradient-based model explanations, randomization sanity checks and quality metrics."""

from saliency_audit.tensor import Tensor, Graph, GraphError, forward, grad, finite_diff_grad, lse_pool

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "forward",
    "grad",
    "finite_diff_grad",
    "lse_pool",
    "__version__",
]
