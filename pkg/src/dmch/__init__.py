"""Multi-task cross-domain hashing: attribute-sequence decoding plus binary
image codes for user-to-shop garment retrieval."""

__version__ = "0.1.0"
