"""Backdoor detection from targeted universal adversarial perturbations."""

__version__ = "0.1.0"
