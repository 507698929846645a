"""Multi-label training: stable BCE-with-logits, Adam, and the training loop.

The loop is deterministic given (seed, config, dataset): per-epoch shuffling,
augmentation draws and stochastic-depth masks each come from their own child
streams of the master seed (see :mod:`sctfusion.seeding`), consumed in a fixed
sequential order. Per-epoch evaluation appends one row to the history and the
best macro-AP checkpoint is retained.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from . import model as model_lib
from . import seeding
from .autograd import Tensor, stable_sigmoid, zero_gradients
from .configs import MetricOptions, TrainConfig
from .datagen import Dataset, augment_sample
from .errors import NonFiniteGradientError, NonFiniteLossError, ShapeError
from .metrics import MetricsReport, compute_report
from .model import Model

HISTORY_HEADER = ["epoch", "train_loss", "ap_micro", "ap_macro", "f2_macro"]


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy between logits and 0/1 targets.

    Computed in the overflow-free form ``max(s,0) - s*y + log1p(exp(-|s|))``
    and averaged over every element (labels, and samples when batched).
    Differentiable in ``logits``; ``targets`` is a constant.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    bad = np.setdiff1d(np.unique(t), [0, 1])
    if bad.size:
        raise ValueError(f"targets must be 0/1, found {bad.tolist()}")
    s = logits.data
    y = t.astype(s.dtype)
    elem = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
    data = np.asarray(elem.mean(), dtype=s.dtype)
    n = s.size

    def backward(g):
        return [(logits, g * (stable_sigmoid(s) - y) / n)]

    return ag._from_op(data, (logits,), backward)


class Adam:
    """Adam with bias correction; moments live beside the named parameters."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        learning_rate: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        """One update; parameters with no accumulated gradient count as zero."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.learning_rate * update

    def zero_grad(self) -> None:
        zero_gradients(self.params.values())

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.params:
            self.m[name] = np.array(state["m"][name], dtype=self.m[name].dtype)
            self.v[name] = np.array(state["v"][name], dtype=self.v[name].dtype)


def clip_gradients(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def _batch_arrays(dataset: Dataset, indices: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    images = [im[indices] for im in dataset.images]
    return images, dataset.labels[indices]


def evaluate(
    model: Model,
    dataset: Dataset,
    options: MetricOptions | None = None,
    batch_size: int = 250,
) -> MetricsReport:
    """Eval-mode sigmoid scores for the whole dataset, reduced to a report."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    options = options or MetricOptions()
    scores = np.zeros((len(dataset), model.config.num_labels), dtype=np.float64)
    # Matrices here are far below the size where BLAS threading pays off;
    # thread handoff otherwise dominates the runtime.
    with ag.no_grad(), threadpool_limits(limits=1, user_api="blas"):
        for start in range(0, len(dataset), batch_size):
            stop = min(start + batch_size, len(dataset))
            images = [im[start:stop] for im in dataset.images]
            logits = model.forward(images, training=False)
            scores[start:stop] = stable_sigmoid(logits.data.astype(np.float64))
    return compute_report(
        scores, dataset.labels, threshold=options.threshold, beta=options.beta
    )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    ap_micro: float
    ap_macro: float
    f2_macro: float

    def row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.ap_micro),
            repr(self.ap_macro),
            repr(self.f2_macro),
        ]


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_ap_macro: float
    best_report: MetricsReport
    checkpoint_path: Optional[Path] = None
    history_path: Optional[Path] = None
    extra_checkpoints: list[Path] = field(default_factory=list)


def write_history(path: str | Path, history: list[EpochRecord]) -> None:
    """History CSV with full-precision (repr) floats — byte-stable across reruns."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for rec in history:
            writer.writerow(rec.row())
    tmp.replace(path)


def train(
    model: Model,
    train_set: Dataset,
    eval_set: Dataset,
    config: TrainConfig,
    seed: int,
    metric_options: MetricOptions | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the full loop: shuffle, augment, forward (training mode), BCE loss,
    backward, Adam step; evaluate per epoch; retain the best-macro-AP model.

    When ``out_dir`` is given, writes ``history.csv``, ``checkpoint.bin`` (best
    epoch) and optional cadence checkpoints ``checkpoint_epoch_<k>.bin``.
    """
    metric_options = metric_options or MetricOptions()
    params = model.named_parameters()
    optimizer = Adam(
        params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    n_train = len(train_set)
    if n_train == 0:
        raise ValueError("empty training set")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history: list[EpochRecord] = []
    best_epoch = -1
    best_ap = -1.0
    best_report: MetricsReport | None = None
    best_snapshot: dict[str, np.ndarray] | None = None
    best_opt_state: dict | None = None
    extra_paths: list[Path] = []

    def run_epoch(epoch: int) -> float:
        perm = seeding.rng_for(seed, seeding.SHUFFLE, epoch).permutation(n_train)
        aug_rng = seeding.rng_for(seed, seeding.AUGMENT, epoch)
        sd_rng = seeding.rng_for(seed, seeding.STOCHASTIC_DEPTH, epoch)

        loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            batch_idx = perm[start : start + config.batch_size]
            raw_images, targets = _batch_arrays(train_set, batch_idx)
            augmented = [[] for _ in raw_images]
            for i in range(len(batch_idx)):
                sample = [mod[i] for mod in raw_images]
                for j, aug in enumerate(augment_sample(sample, config.augment, aug_rng)):
                    augmented[j].append(aug)
            images = [np.stack(mod) for mod in augmented]

            logits = model.forward(
                images, training=True, rng=sd_rng, sd_rate=config.sd_rate
            )
            loss = bce_with_logits(logits, targets)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch starting at {start}"
                )
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                clip_gradients(params, config.grad_clip)
            optimizer.step()
            loss_sum += loss_value * len(batch_idx)
        return loss_sum / n_train

    for epoch in range(1, config.epochs + 1):
        with threadpool_limits(limits=1, user_api="blas"):  # see evaluate()
            train_loss = run_epoch(epoch)
        report = evaluate(model, eval_set, metric_options)
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                ap_micro=report.ap_micro,
                ap_macro=report.ap_macro,
                f2_macro=report.f2_macro,
            )
        )

        if report.ap_macro > best_ap:
            best_ap = report.ap_macro
            best_epoch = epoch
            best_report = report
            best_snapshot = {k: np.array(p.data) for k, p in params.items()}
            if config.save_optimizer_state:
                state = optimizer.state()
                best_opt_state = {
                    "step": state["step"],
                    "m": {k: np.array(v) for k, v in state["m"].items()},
                    "v": {k: np.array(v) for k, v in state["v"].items()},
                }

        if out_dir is not None and config.checkpoint_every:
            if epoch % config.checkpoint_every == 0:
                p = out_dir / f"checkpoint_epoch_{epoch}.bin"
                model_lib.save_checkpoint(p, model, epoch=epoch, seed=seed)
                extra_paths.append(p)

    assert best_report is not None and best_snapshot is not None
    for name, data in best_snapshot.items():
        params[name].data = data

    checkpoint_path = history_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "checkpoint.bin"
        model_lib.save_checkpoint(
            checkpoint_path,
            model,
            epoch=best_epoch,
            seed=seed,
            optimizer_state=best_opt_state,
        )
        history_path = out_dir / "history.csv"
        write_history(history_path, history)

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_ap_macro=best_ap,
        best_report=best_report,
        checkpoint_path=checkpoint_path,
        history_path=history_path,
        extra_checkpoints=extra_paths,
    )
