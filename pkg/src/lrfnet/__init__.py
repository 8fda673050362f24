"""Small numpy neural networks with condition-number tracking and AdaptiveLRF regularization."""

__version__ = "0.1.0"
