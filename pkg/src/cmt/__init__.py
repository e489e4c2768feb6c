"""Compression-memory training for frozen decoder-only language models.

A small frozen base model is adapted to a document stream without weight
updates: each document is condensed into a fixed-size latent memory, memories
are stored in a bank, and at question time a learned aggregation of retrieved
memories is injected into every layer of the frozen model as a cached
key/value prefix.
"""

__version__ = "0.1.0"
