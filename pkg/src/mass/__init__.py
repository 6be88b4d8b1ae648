"""Context-aware GAN trace generation and replay for mobile network traffic."""

__version__ = "0.1.0"
