"""Procurement-auction toolkit: equilibrium simulation, nonparametric cost
recovery, collusion screens and the collusion-proof counterfactual."""

__version__ = "0.1.0"
