"""refpop: dynamic population-based meta-learning for referential games."""

__version__ = "0.1.0"
