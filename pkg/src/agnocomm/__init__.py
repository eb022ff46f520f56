"""Task-agnostic multi-agent communication through a pre-trained set autoencoder."""

__version__ = "0.1.0"
