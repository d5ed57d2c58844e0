"""Multi-task sequence-to-sequence forecasting of battery capacity fade and resistance rise."""

__version__ = "0.1.0"
