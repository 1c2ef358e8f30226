"""Few-shot image classification with support-adaptive attention.

A small numpy tensor core with reverse-mode differentiation, a four-block
convolutional feature extractor with meta-reweighting and spatial attention,
episodic training/evaluation, and a CLI (``fsattn``) for training,
evaluation, ablations, gradient checking, and attention visualization.
"""

from .autodiff import Tensor, backward, no_grad
from .data import AugmentSpec, Dataset, load_directory_dataset, synthetic_shapes_generate
from .episodic import Episode, EpisodeSpec, EvalReport, TrainConfig, evaluate, train
from .errors import FewshotError
from .model import AdaptiveAttentionNetwork, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "AdaptiveAttentionNetwork",
    "AugmentSpec",
    "Dataset",
    "Episode",
    "EpisodeSpec",
    "EvalReport",
    "FewshotError",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "load_directory_dataset",
    "no_grad",
    "synthetic_shapes_generate",
    "train",
]
