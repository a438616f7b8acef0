"""Desk-scale pose estimation building blocks: FASM bottlenecks, feature fusion,
DUC heads, OHKM loss, heatmap decoding and OKS/PCKh evaluation."""

__version__ = "0.1.0"
