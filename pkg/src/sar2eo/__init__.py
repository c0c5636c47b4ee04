"""SAR-to-optical translation with dual-feature generators and transparency tools."""

__version__ = "0.1.0"
