"""Chord-progression modeling toolkit: notation, tokenizer, training, sampling."""

__version__ = "0.1.0"
