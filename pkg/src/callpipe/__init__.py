"""callpipe: bioacoustic call detection and classification toolkit."""

__version__ = "0.1.0"
