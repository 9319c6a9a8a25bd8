"""Evasion attacks on small graph neural networks.

Trains GCN / SGC / GIN / GraphSAGE-mean models on node-classification
graphs and mounts single-node feature-perturbation and single-edge flip
attacks against them, built on a self-contained reverse-mode autodiff
engine whose gradients reach both node features and edge weights.
"""

__version__ = "0.1.0"
