"""Budget-controlled policy-gradient training for a small mixture-of-experts policy."""

__version__ = "0.1.0"
