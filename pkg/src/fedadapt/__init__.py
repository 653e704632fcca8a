"""Deterministic federated-learning simulator.

Frozen-backbone embeddings feed a small attention adapter on each client;
minority classes are balanced with a conditional GAN in embedding space;
clients exchange blockwise-quantized low-rank adapter updates that the
server combines by sample-count-weighted averaging, with exact byte
accounting for everything that crosses the simulated wire.
"""

__version__ = "0.1.0"
