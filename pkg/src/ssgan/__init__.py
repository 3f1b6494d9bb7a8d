"""Self-supervised GAN features for unsupervised few-shot recognition."""

__version__ = "0.1.0"
