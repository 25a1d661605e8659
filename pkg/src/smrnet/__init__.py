"""Attention-augmented multi-scale two-stage detector with a synthetic gel-sensor dataset."""

__version__ = "0.1.0"
