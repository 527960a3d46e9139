"""Token-level clipped policy-gradient RL on a synthetic boxed-answer task."""

__version__ = "0.1.0"
