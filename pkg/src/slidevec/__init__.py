"""slidevec: compress whole-slide rasters into per-slide bag representations and classify them.

Pipeline stages: tile a slide into 512x512 patches, keep nucleus-dense tissue
patches, cluster externally computed patch embeddings with k-means, represent
each slide by its k cluster-mean vectors, and train an attention-pooled MIL
classifier (or an MLP baseline) on those bags.
"""

__version__ = "0.1.0"
