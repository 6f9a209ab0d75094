"""End-to-end multimodal (speech + visual) continuous affect regression."""

__version__ = "0.1.0"
