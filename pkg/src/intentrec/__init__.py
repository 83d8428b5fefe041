"""Intent-aware self-attentive sequential recommender, trained end to end
on a hand-built reverse-mode autodiff engine."""

__version__ = "0.1.0"
