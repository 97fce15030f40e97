"""Desk-scale disease-aware report generation lab.

Two-stage training over synthetic chest studies: disease-token representation
learning, then retrieval-augmented report decoding with a frozen backbone.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check  # noqa: F401
