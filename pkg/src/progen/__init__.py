"""Progressive image -> concepts -> report generation."""

__version__ = "0.1.0"
