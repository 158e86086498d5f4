"""Power-aware multi-site HPC scheduling with GCN power prediction."""

__version__ = "0.1.0"
