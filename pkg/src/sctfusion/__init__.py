"""Multi-modal ViT with synchronized class-token fusion.

Core numerics live in :mod:`sctfusion.autograd` (reverse-mode tensors),
:mod:`sctfusion.blocks` (ViT constituents) and :mod:`sctfusion.model`
(architecture assembly); :mod:`sctfusion.datagen`, :mod:`sctfusion.training`
and :mod:`sctfusion.metrics` provide the synthetic dataset, the training loop
and the multi-label metrics. :mod:`sctfusion.service` wraps everything as a
FastAPI app and :mod:`sctfusion.cli` is a thin client for it.
"""

__version__ = "0.1.0"

from .autograd import Tensor  # noqa: F401
from .configs import (  # noqa: F401
    AugmentConfig,
    GeneratorConfig,
    MetricOptions,
    ModalitySpec,
    ModelConfig,
    RunConfig,
    TrainConfig,
)
from .model import Model, build_model, count_parameters  # noqa: F401
