"""Transportation-cost inequalities on free path spaces, checked numerically.

Finite-state Markov chains give exact (enumerated) verification of how TCI
constants compose under a random initial law; a stochastic heat equation
with space-time white noise is simulated to check the coupling estimate
that feeds the same composition.
"""

from pathtci.metric_measure import (
    DimensionError,
    DiscreteMeasure,
    FiniteMetricSpace,
    empirical_measure,
    product_metric_max,
    relative_entropy,
    tilt_measure,
)

__all__ = [
    "DimensionError",
    "DiscreteMeasure",
    "FiniteMetricSpace",
    "empirical_measure",
    "product_metric_max",
    "relative_entropy",
    "tilt_measure",
]

__version__ = "0.1.0"
