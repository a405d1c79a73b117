"""Layers, graphs, builders and the fused executor."""
