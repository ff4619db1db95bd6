"""edgebench: a self-contained edge/cloud pub-sub benchmark harness."""

__version__ = "0.1.0"
