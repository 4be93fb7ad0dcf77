"""Variational Bayes for hierarchical linear ballistic accumulator models.

Provides the LBA trial-level distributions and gradients, the hierarchical
random-effects model, factor-Gaussian variational optimization (plain and
hybrid with an exact inverse-Wishart conditional for the group covariance),
K-fold cross-validated model screening, and a simulation-study toolkit, plus
a command-line front end.
"""

__version__ = "0.1.0"
