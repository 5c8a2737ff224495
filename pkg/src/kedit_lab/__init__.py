"""Desk-scale laboratory for continual, compositional knowledge editing.

A tiny decoder-only model over word and synthetic image tokens is edited
sequentially through a dual external memory, two modality-specific low-rank
FFN adapters and an indicator-gated low-rank attention connector.
"""

__version__ = "0.1.0"
