"""Gaussian process classification with compactly supported covariances.

Expectation propagation runs on a sparse LDL' factorization that is patched
one row at a time, so the cost of inference follows the sparsity of the
covariance matrix.
"""

__version__ = "0.1.0"
