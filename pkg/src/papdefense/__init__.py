"""Phase- and amplitude-aware prompting defense for frozen image classifiers."""

__version__ = "0.1.0"
