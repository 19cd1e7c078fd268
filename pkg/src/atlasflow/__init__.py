"""Atlas flow: multi-chart invertible generative models on data manifolds."""

__version__ = "0.1.0"
