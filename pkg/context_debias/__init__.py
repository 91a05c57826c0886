"""Contextual-debiasing pipeline: personalized generation, verification and bias-aware evaluation."""

__version__ = "0.3.0"
