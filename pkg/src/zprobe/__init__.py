"""Byzantine-robust secure aggregation for federated learning.

Masked secure aggregation with zero-knowledge correctness and robustness
checks over IT-MAC authenticated values, median-of-cluster-means thresholds
and sampled check budgets, plus a desk-scale federated training harness.
"""

from zprobe.field import P, FixedVec, fp_decode, fp_encode, lift_signed

__version__ = "0.1.0"

__all__ = ["P", "FixedVec", "fp_encode", "fp_decode", "lift_signed", "__version__"]
