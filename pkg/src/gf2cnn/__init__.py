"""Feature-map compression over GF(2) for small CNNs: quantization, bit planes, fusion-aware memory planning."""

__version__ = "0.1.0"
