"""apckit: self-supervised speech representations via future-frame prediction."""

__version__ = "0.1.0"
