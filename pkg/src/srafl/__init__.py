"""Desk-scale simulator for secure and robust federated aggregation.

Updates are quantized into a prime field, secret shared with Lagrange
coding under constant-size commitments, attested by secret-shared circuit
proofs, and aggregated by a three-round server protocol that survives
Byzantine users up to a threshold.
"""

__version__ = "0.1.0"

from . import adversary, fields, harness, lcc, protocol, robust, snip, wire  # noqa: F401
