"""Bayesian inference engine combining multilevel network meta-regression with
synthetic likelihoods over published subgroup summaries, sampled by HMC with
continuous relaxations and corrected post hoc by Pareto-smoothed importance
sampling.
"""

__version__ = "0.1.0"
