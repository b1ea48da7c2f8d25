"""Attack-specific low-rank experts with adaptive gated fusion, desk scale."""

__version__ = "0.1.0"
