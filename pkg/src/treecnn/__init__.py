"""Tree-CNN: a self-growing hierarchy of small CNN classifiers for incremental learning."""

__version__ = "0.1.0"
