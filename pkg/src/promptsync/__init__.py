"""Test-time multi-modal prompt tuning on a frozen desk-scale dual encoder."""
from .kernels import BACKEND

__version__ = "0.1.0"
