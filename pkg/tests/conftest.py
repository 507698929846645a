"""Shared fixtures: tiny model configs and a small in-memory dataset."""

import numpy as np
import pytest

from sctfusion.configs import (
    GeneratorConfig,
    LabelGroups,
    ModalityShape,
    ModalitySpec,
    ModelConfig,
)
from sctfusion.datagen import Dataset, generate_arrays


def tiny_modalities() -> list[ModalitySpec]:
    return [
        ModalitySpec(name="m0", height=8, width=8, channels=1, patch_size=4),
        ModalitySpec(name="m1", height=8, width=8, channels=2, patch_size=4),
    ]


def tiny_model_config(mode: str = "sct", **overrides) -> ModelConfig:
    base = dict(
        mode=mode,
        modalities=tiny_modalities() if mode != "single" else tiny_modalities()[:1],
        embed_dim=8,
        depth=2,
        heads=2,
        num_labels=4,
        sd_rate=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def small_generator_config(**overrides) -> GeneratorConfig:
    base = dict(
        modalities=[
            ModalityShape(name="m0", height=16, width=16, channels=2),
            ModalityShape(name="m1", height=16, width=16, channels=3),
        ],
        num_labels=6,
        groups=LabelGroups(first_only=2, second_only=2, joint=2),
        presence_prior=0.3,
        amplitude=1.0,
        decoy_prob=0.5,
        noise_sigma=0.1,
        num_samples=96,
        seed=11,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


@pytest.fixture()
def small_dataset() -> Dataset:
    config = small_generator_config()
    images, labels = generate_arrays(config)
    return Dataset(
        images=images,
        labels=labels,
        modality_names=[m.name for m in config.modalities],
        label_names=config.resolved_label_names(),
    )


def random_images(config: ModelConfig, batch: int, rng: np.random.Generator, scale=1.0):
    return [
        (scale * rng.standard_normal((batch, m.height, m.width, m.channels))).astype(
            np.float32
        )
        for m in config.modalities
    ]
