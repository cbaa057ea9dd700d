"""Conformal prediction sets that hold up under random or adversarial input perturbations."""

__version__ = "0.1.0"
