"""Desk-scale long-prompt zero-shot TTS on a synthetic Markov-prosody corpus."""

__version__ = "0.1.0"
