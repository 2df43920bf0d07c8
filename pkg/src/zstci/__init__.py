"""Zero-shot translation for class-incremental embedding networks."""

__version__ = "0.1.0"
