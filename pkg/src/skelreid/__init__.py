"""Unsupervised skeleton-based person re-identification.

Pipeline: multi-level body graphs from 3D joint sequences, a graph
relation encoder producing one embedding per sequence, density-clustered
prototype contrastive training on unlabeled data, and probe/gallery
evaluation with CMC, mAP, and representation-geometry metrics.
"""

__version__ = "0.1.0"
