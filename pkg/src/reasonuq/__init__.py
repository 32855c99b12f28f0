"""Uncertainty estimates for reasoning-model answers and the metrics to judge them."""

from . import analysis, estimators, interventions, metrics, parsing, prompts, records

__version__ = "0.1.0"

__all__ = ["analysis", "estimators", "interventions", "metrics", "parsing", "prompts", "records"]
