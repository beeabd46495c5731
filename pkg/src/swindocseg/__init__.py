"""Document instance segmentation at desk scale: windowed-attention backbone,
deformable-attention transformer with denoising query groups, unified query
selection with contrastive projection heads, hybrid bipartite matching, and
pixel-embedding-map mask prediction."""

from .model import ModelConfig, SwinDocSegmenter

__all__ = ["ModelConfig", "SwinDocSegmenter"]
__version__ = "0.1.0"
