"""Street-name transcription auditing, impact pricing, and synthetic-data mitigation."""

__version__ = "0.1.0"
