"""Multi-turn text-to-SQL engine: open-domain database retrieval, demonstration
selection and augmentation, Pre-SQL schema filtering, Self-Debug repair, and
execution-based evaluation."""

__version__ = "0.1.0"
