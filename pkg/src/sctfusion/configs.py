"""Configuration models.

Everything a run needs is described by one :class:`RunConfig` JSON document.
All models reject unknown keys (``extra="forbid"``) and validate their
invariants up front, so an invalid configuration fails with a field-level
message before any work starts or any file is written.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModalitySpec(StrictModel):
    """Geometry of one input modality as seen by a model."""

    name: str
    height: int = Field(gt=0)
    width: int = Field(gt=0)
    channels: int = Field(gt=0)
    patch_size: int = Field(gt=0)

    @model_validator(mode="after")
    def _divisible(self) -> "ModalitySpec":
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"modality '{self.name}': {self.height}x{self.width} not divisible "
                f"by patch size {self.patch_size}"
            )
        return self

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class ModelConfig(StrictModel):
    """Full architecture description for any of the three model modes."""

    mode: Literal["sct", "early", "single"]
    modalities: list[ModalitySpec] = Field(min_length=1)
    embed_dim: int = Field(gt=0)
    depth: int = Field(ge=1)
    heads: int = Field(ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    num_labels: int = Field(ge=1)
    use_pos_embed: bool = True
    sd_rate: float = Field(default=0.25, ge=0.0, lt=1.0)
    share_fusion: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "ModelConfig":
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.mlp_hidden_dim < 1:
            raise ValueError(f"mlp_ratio {self.mlp_ratio} gives an empty hidden layer")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names: {names}")
        if self.mode == "single" and len(self.modalities) != 1:
            raise ValueError("mode 'single' requires exactly one modality")
        if self.mode == "early":
            ref = self.modalities[0]
            for m in self.modalities[1:]:
                if (m.height, m.width, m.patch_size) != (ref.height, ref.width, ref.patch_size):
                    raise ValueError(
                        f"mode 'early' requires equal spatial dims and patch size; "
                        f"modality '{m.name}' is {m.height}x{m.width} (p={m.patch_size}) "
                        f"vs '{ref.name}' {ref.height}x{ref.width} (p={ref.patch_size})"
                    )
        return self

    @property
    def mlp_hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)


class ModalityShape(StrictModel):
    """Geometry of one modality in a generated dataset (no patching involved)."""

    name: str
    height: int = Field(gt=0)
    width: int = Field(gt=0)
    channels: int = Field(gt=0)


class LabelGroups(StrictModel):
    """How many classes are evidenced by modality 0 only, modality 1 only, or all."""

    first_only: int = Field(ge=0)
    second_only: int = Field(ge=0)
    joint: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.first_only + self.second_only + self.joint


class GeneratorConfig(StrictModel):
    """Procedural multi-modal multi-label dataset description.

    Each class owns a disjoint square cell of ``ceil(sqrt(num_labels))`` pixels
    per side on every modality's image (cells assigned row-major over the cell
    grid) and stamps ``amplitude`` into its designated channel there when the
    label is on. Joint classes stamp all modalities; when their label is off
    they stamp, with probability ``decoy_prob``, exactly one uniformly chosen
    modality. I.i.d. Gaussian pixel noise is added last.
    """

    modalities: list[ModalityShape] = Field(min_length=2)
    num_labels: int = Field(ge=1)
    groups: LabelGroups
    presence_prior: float = Field(gt=0.0, lt=1.0)
    amplitude: float = 1.0
    decoy_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    noise_sigma: float = Field(default=0.25, ge=0.0)
    num_samples: int = Field(ge=1)
    seed: int = Field(ge=0)
    label_names: Optional[list[str]] = None

    @model_validator(mode="after")
    def _consistent(self) -> "GeneratorConfig":
        if self.groups.total != self.num_labels:
            raise ValueError(
                f"label groups sum to {self.groups.total}, expected num_labels={self.num_labels}"
            )
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names: {names}")
        if self.label_names is not None and len(self.label_names) != self.num_labels:
            raise ValueError(
                f"{len(self.label_names)} label names for {self.num_labels} labels"
            )
        side = self.cell_side
        for m in self.modalities:
            rows, cols = m.height // side, m.width // side
            if rows == 0 or cols == 0:
                raise ValueError(
                    f"modality '{m.name}': class cell of {side}px does not fit a "
                    f"{m.height}x{m.width} image (cell smaller than one pixel row/column)"
                )
            if self.num_labels > rows * cols:
                raise ValueError(
                    f"modality '{m.name}': {self.num_labels} labels exceed grid capacity "
                    f"{rows}x{cols}={rows * cols} at {side}px cells"
                )
        return self

    @property
    def cell_side(self) -> int:
        return math.ceil(math.sqrt(self.num_labels))

    def resolved_label_names(self) -> list[str]:
        if self.label_names is not None:
            return list(self.label_names)
        return [f"class_{k:02d}" for k in range(self.num_labels)]


def default_generator_config(seed: int = 0) -> GeneratorConfig:
    """Desk-scale default: 2 modalities, 12 labels in a 4/4/4 split, 2500 samples."""
    return GeneratorConfig(
        modalities=[
            ModalityShape(name="m0", height=30, width=30, channels=2),
            ModalityShape(name="m1", height=30, width=30, channels=3),
        ],
        num_labels=12,
        groups=LabelGroups(first_only=4, second_only=4, joint=4),
        presence_prior=0.3,
        amplitude=1.0,
        decoy_prob=0.5,
        noise_sigma=0.25,
        num_samples=2500,
        seed=seed,
    )


class AugmentConfig(StrictModel):
    """Training-time augmentations, applied per modality in a fixed order:
    sensor drop (with a retain-one guarantee), then horizontal/vertical flips
    at probability 0.5 each, then a zero-padded integer shift."""

    sensor_drop_prob: float = Field(default=0.25, ge=0.0, le=1.0)
    flip: bool = True
    max_shift: int = Field(default=3, ge=0)


class TrainConfig(StrictModel):
    learning_rate: float = Field(default=1e-4, gt=0)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=32, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0)
    sd_rate: float = Field(default=0.25, ge=0.0, lt=1.0)
    augment: AugmentConfig = AugmentConfig()
    seed: Optional[int] = None
    checkpoint_every: int = Field(default=0, ge=0)
    grad_clip: Optional[float] = Field(default=None, gt=0)
    dataset_dir: Optional[str] = None
    train_count: Optional[int] = Field(default=None, ge=1)
    eval_count: Optional[int] = Field(default=None, ge=1)
    save_optimizer_state: bool = False


class MetricOptions(StrictModel):
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    beta: float = Field(default=2.0, gt=0)


class GradcheckOptions(StrictModel):
    epsilon: float = Field(default=1e-4, gt=0)
    tolerance: float = Field(default=1e-4, gt=0)


class RunConfig(StrictModel):
    """Top-level experiment description (one JSON file)."""

    seed: int = Field(default=0, ge=0)
    output_dir: str = "runs/run"
    generator: Optional[GeneratorConfig] = None
    model: Optional[ModelConfig] = None
    train: TrainConfig = TrainConfig()
    metrics: MetricOptions = MetricOptions()
    gradcheck: GradcheckOptions = GradcheckOptions()
    sweep_embed_dims: Optional[list[int]] = None


def load_run_config(path: str | Path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return RunConfig.model_validate(raw)


def apply_mode(config: ModelConfig, mode: str) -> ModelConfig:
    """Apply a ``--mode`` override: ``sct``, ``early`` or ``single:<name|index>``."""
    if mode in ("sct", "early"):
        return config.model_copy(update={"mode": mode})
    if mode == "single":
        if len(config.modalities) != 1:
            raise ValueError("mode 'single' needs a modality, e.g. single:m0 or single:0")
        return config.model_copy(update={"mode": "single"})
    if mode.startswith("single:"):
        key = mode.split(":", 1)[1]
        chosen = None
        for i, m in enumerate(config.modalities):
            if m.name == key or (key.isdigit() and int(key) == i):
                chosen = m
                break
        if chosen is None:
            raise ValueError(
                f"unknown modality '{key}'; have "
                f"{[m.name for m in config.modalities]}"
            )
        return config.model_copy(update={"mode": "single", "modalities": [chosen]})
    raise ValueError(f"unknown mode '{mode}' (expected sct, early or single:<modality>)")
