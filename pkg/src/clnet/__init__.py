"""Cross-view lesion detection with learned pairwise correspondence.

A desk-scale pipeline: a tiny float64 autodiff engine, a view-interactive
set-prediction detector, a link-query correspondence head with dustbin
slots, Hungarian label assignment, a synthetic two-view data generator,
and FROC evaluation, all wired to one CLI.
"""

from . import tensor
from .tensor import Tensor, Tape, backward, finite_diff_check

__all__ = ["tensor", "Tensor", "Tape", "backward", "finite_diff_check"]

__version__ = "0.1.0"
