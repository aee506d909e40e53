"""Word-embedding TracIn: training-data influence for small text classifiers."""

__version__ = "0.1.0"
