"""Depression detection from speech with speaker embeddings, in numpy."""

__version__ = "0.1.0"
