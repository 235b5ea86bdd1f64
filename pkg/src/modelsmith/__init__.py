"""modelsmith: a knowledge-grounded agent harness that builds ML models in parallel solution repositories."""

__version__ = "0.1.0"
