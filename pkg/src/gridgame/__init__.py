"""Smart-grid load-alteration attacks against adaptive voltage protection."""

__version__ = "0.1.0"
