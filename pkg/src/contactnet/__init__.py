"""Contact-network construction and epidemic simulation from ego-network surveys."""

__version__ = "0.1.0"
