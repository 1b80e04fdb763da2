"""Few-shot relation classification with prototypical networks, meta-based
adversarial training and relation-level distance scoring, on a small numpy
autodiff engine."""

__version__ = "0.1.0"
