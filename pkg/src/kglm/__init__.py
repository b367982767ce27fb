"""Causal LM over linearized multilingual KG facts, with trie-constrained
link prediction, calibrated entity retrieval, and classical KGE baselines."""

__version__ = "0.1.0"
