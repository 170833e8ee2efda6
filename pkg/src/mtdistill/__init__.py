"""Multitask facial-affect learning from partially labelled data with teacher/student distillation.

Modules: ``numerics`` (softmax, CE/BCE, VA bins, CCC), ``model`` (shared-trunk MLP),
``losses``, ``balance``, ``data``, ``training``, ``evaluate`` and ``cli``.
"""
from mtdistill.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
