"""Fair GNNs through distillation from partial-data experts."""

__version__ = "0.1.0"
