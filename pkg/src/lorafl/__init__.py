"""Deterministic federated-learning simulator for LoRA backdoor studies."""

__version__ = "0.1.0"
