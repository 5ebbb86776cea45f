"""Sparse unbiased stochastic backpropagation through attention.

Subpackages cover the exact attention forward/backward kernel, the sparse
stochastized backward pass, the general DAG stochastization formalism, the
k-weight tradeoff model, attention-spread analytics, and a variance lab
that sweeps the retention parameter on a seeded toy transformer stack.
"""

from susbp.numerics import Mat, PowerLawFit, RngStream

__all__ = ["Mat", "PowerLawFit", "RngStream"]
__version__ = "0.1.0"
