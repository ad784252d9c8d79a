"""Sub-network localization fine-tuning lab."""

__version__ = "0.1.0"
