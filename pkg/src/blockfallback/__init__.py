"""Reference arithmetic for INT8 training with dynamic block-level fallback."""

__version__ = "0.1.0"
