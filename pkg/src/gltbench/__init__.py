"""Generalized long-tail benchmark toolkit: synthetic data with class- and
attribute-wise imbalance, the CLT/ALT/GLT evaluation protocols, invariant
feature learning and its re-balancing baselines."""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
