"""Desk-scale federated clustering with cluster-contrastive representation
learning: a pure-numpy siamese MLP, contrastive loss heads, k-means with
deterministic seeding, heterogeneity-controlled partitioning, the federated
protocol with baselines and ablations, clustering metrics, and a CLI harness.
"""

__version__ = "0.1.0"
