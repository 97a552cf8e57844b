"""Tennis-grunt classification: audio ingestion, acoustic features, classifiers and
player-independent cross-validation."""

__version__ = "0.1.0"
