"""exgen: a desk-scale reading-comprehension exercise generator.

The pipeline runs entirely on CPU with a tiny transformer: supervised
fine-tuning on instruction triplets, pairwise reward modeling, PPO with
KL-penalized rewards, attribute-graph steered decoding with discriminative
candidate filtering, n-gram evaluation metrics, and a CLI/HTTP serving layer.
"""

__version__ = "0.1.0"
