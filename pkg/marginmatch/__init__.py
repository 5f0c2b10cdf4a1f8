"""MarginMatch - pseudo-label selection with confidence and AUM gates."""

__version__ = "0.1.0"
