"""Read-only figure rendering over gentle run directories."""

__version__ = "0.1.0"
