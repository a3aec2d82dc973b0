"""Data-free knowledge amalgamation at desk scale."""
__version__ = "0.1.0"
