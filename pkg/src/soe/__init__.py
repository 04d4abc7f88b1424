"""Small-object editing with joint local/global cross-attention guidance."""

__version__ = "0.1.0"
