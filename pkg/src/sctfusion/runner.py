"""Command implementations shared by the HTTP service and the CLI.

Each function validates everything it needs up front, performs one unit of
work (generate / train / evaluate / gradient-check / count), writes its
deterministic artifacts under the requested output directory, and returns a
plain result object the service serializes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import seeding
from .configs import (
    GeneratorConfig,
    MetricOptions,
    ModelConfig,
    RunConfig,
    apply_mode,
)
from .datagen import Dataset, generate_dataset, load_dataset, manifest_checksum
from .errors import ConfigError
from .gradcheck import GradCheckReport, finite_difference_check
from .metrics import MetricsReport
from .model import Model, build_model, count_parameters, load_checkpoint
from .training import EpochRecord, TrainResult, bce_with_logits, evaluate, train

GRADCHECK_PARAMETER_LIMIT = 20_000


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


@dataclass
class GenDataOutcome:
    dataset_dir: str
    manifest_crc32c: str
    num_samples: int
    modalities: list[str]
    files: dict[str, str]


def run_gen_data(config: GeneratorConfig, out_dir: str | Path) -> GenDataOutcome:
    manifest = generate_dataset(config, out_dir)
    return GenDataOutcome(
        dataset_dir=str(out_dir),
        manifest_crc32c=manifest_checksum(out_dir),
        num_samples=manifest["num_samples"],
        modalities=[m["name"] for m in manifest["modalities"]],
        files=dict(manifest["files"]),
    )


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _resolve_model(run: RunConfig, mode: Optional[str]) -> ModelConfig:
    if run.model is None:
        raise ConfigError("run config has no 'model' section")
    model_cfg = run.model
    if mode:
        try:
            model_cfg = apply_mode(model_cfg, mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return model_cfg


def _dataset_for(run: RunConfig, model_cfg: ModelConfig) -> Dataset:
    dataset_dir = run.train.dataset_dir or str(Path(run.output_dir) / "dataset")
    dataset = load_dataset(dataset_dir)
    wanted = [m.name for m in model_cfg.modalities]
    dataset = dataset.select_modalities(wanted)
    for spec, arr in zip(model_cfg.modalities, dataset.images):
        if arr.shape[1:] != (spec.height, spec.width, spec.channels):
            raise ConfigError(
                f"modality '{spec.name}': dataset shape {arr.shape[1:]} does not match "
                f"model config {(spec.height, spec.width, spec.channels)}"
            )
    if dataset.num_labels != model_cfg.num_labels:
        raise ConfigError(
            f"dataset has {dataset.num_labels} labels, model expects {model_cfg.num_labels}"
        )
    return dataset


def _split(dataset: Dataset, run: RunConfig) -> tuple[Dataset, Dataset]:
    m = len(dataset)
    eval_count = run.train.eval_count if run.train.eval_count is not None else max(1, m // 5)
    train_count = (
        run.train.train_count if run.train.train_count is not None else m - eval_count
    )
    if train_count + eval_count > m:
        raise ConfigError(
            f"split train={train_count} + eval={eval_count} exceeds dataset size {m}"
        )
    if train_count < 1 or eval_count < 1:
        raise ConfigError(f"split train={train_count}, eval={eval_count} must be positive")
    return dataset.subset(0, train_count), dataset.subset(m - eval_count, m)


@dataclass
class TrainOutcome:
    out_dir: str
    checkpoint_path: str
    history_path: str
    metrics_path: str
    best_epoch: int
    best_ap_macro: float
    history: list[EpochRecord]
    report: MetricsReport
    mode: str
    seed: int


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def run_train(
    run: RunConfig,
    out_dir: Optional[str] = None,
    seed: Optional[int] = None,
    mode: Optional[str] = None,
) -> TrainOutcome:
    model_cfg = _resolve_model(run, mode)
    master_seed = run.seed if seed is None else seed
    train_seed = run.train.seed if run.train.seed is not None else master_seed
    dataset = _dataset_for(run, model_cfg)
    train_set, eval_set = _split(dataset, run)

    destination = Path(out_dir or run.output_dir)
    destination.mkdir(parents=True, exist_ok=True)

    model = build_model(model_cfg, seed=train_seed)
    result: TrainResult = train(
        model,
        train_set,
        eval_set,
        run.train,
        seed=train_seed,
        metric_options=run.metrics,
        out_dir=destination,
    )

    metrics_path = destination / "metrics.json"
    _write_json(metrics_path, result.best_report.model_dump())
    _write_json(
        destination / "run_config.json",
        {
            "seed": train_seed,
            "mode": model_cfg.mode,
            "model": model_cfg.model_dump(),
            "train": run.train.model_dump(),
            "metrics": run.metrics.model_dump(),
        },
    )
    assert result.checkpoint_path is not None and result.history_path is not None
    return TrainOutcome(
        out_dir=str(destination),
        checkpoint_path=str(result.checkpoint_path),
        history_path=str(result.history_path),
        metrics_path=str(metrics_path),
        best_epoch=result.best_epoch,
        best_ap_macro=result.best_ap_macro,
        history=result.history,
        report=result.best_report,
        mode=model_cfg.mode,
        seed=train_seed,
    )


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


@dataclass
class EvalOutcome:
    report: MetricsReport
    metrics_path: Optional[str]
    checkpoint_path: str
    dataset_dir: str


def run_eval(
    checkpoint: str | Path,
    dataset_dir: str | Path,
    eval_count: Optional[int] = None,
    metric_options: MetricOptions | None = None,
    out_dir: Optional[str] = None,
) -> EvalOutcome:
    loaded = load_checkpoint(checkpoint)
    dataset = load_dataset(dataset_dir)
    dataset = dataset.select_modalities([m.name for m in loaded.model.config.modalities])
    if eval_count is not None:
        if eval_count > len(dataset):
            raise ConfigError(f"eval_count {eval_count} exceeds dataset size {len(dataset)}")
        dataset = dataset.subset(len(dataset) - eval_count, len(dataset))
    report = evaluate(loaded.model, dataset, metric_options)
    metrics_path = None
    if out_dir is not None:
        destination = Path(out_dir)
        destination.mkdir(parents=True, exist_ok=True)
        path = destination / "metrics.json"
        _write_json(path, report.model_dump())
        metrics_path = str(path)
    return EvalOutcome(
        report=report,
        metrics_path=metrics_path,
        checkpoint_path=str(checkpoint),
        dataset_dir=str(dataset_dir),
    )


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def run_gradcheck(
    run: RunConfig,
    seed: Optional[int] = None,
    mode: Optional[str] = None,
) -> GradCheckReport:
    """Finite-difference check of the configured model in float64.

    Inputs and a multi-hot target come from the inputs stream of the seed; the
    forward runs in eval mode so it is deterministic. Configurations above
    ``GRADCHECK_PARAMETER_LIMIT`` scalars are rejected (central differences
    cost two forwards per scalar).
    """
    model_cfg = _resolve_model(run, mode)
    master_seed = run.seed if seed is None else seed

    total, _ = count_parameters(build_model(model_cfg, seed=0, init=False))
    if total > GRADCHECK_PARAMETER_LIMIT:
        raise ConfigError(
            f"gradcheck limited to {GRADCHECK_PARAMETER_LIMIT} parameters, config has {total}"
        )

    model = build_model(model_cfg, seed=master_seed, dtype=np.float64)
    rng = seeding.rng_for(master_seed, seeding.INPUTS)
    images = [
        rng.uniform(-2.0, 2.0, size=(1, m.height, m.width, m.channels))
        for m in model_cfg.modalities
    ]
    targets = rng.integers(0, 2, size=(1, model_cfg.num_labels)).astype(np.float64)

    def loss_fn():
        logits = model.forward(images, training=False)
        return bce_with_logits(logits, targets)

    return finite_difference_check(
        loss_fn,
        model.named_parameters(),
        epsilon=run.gradcheck.epsilon,
        tolerance=run.gradcheck.tolerance,
    )


# ---------------------------------------------------------------------------
# params
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    embed_dim: int
    params: int
    ap_macro: float


@dataclass
class ParamsOutcome:
    total: int
    by_module: dict[str, int]
    mode: str
    sweep: Optional[list[SweepRow]]
    sweep_csv_path: Optional[str]


def run_params(
    run: RunConfig,
    out_dir: Optional[str] = None,
    seed: Optional[int] = None,
    mode: Optional[str] = None,
) -> ParamsOutcome:
    """Exact parameter accounting; with ``sweep_embed_dims`` set, additionally
    train/evaluate one model per embedding dimension (shared seed) and emit
    ``sweep.csv`` with rows ``d_e,params,ap_macro``."""
    model_cfg = _resolve_model(run, mode)
    total, by_module = count_parameters(build_model(model_cfg, seed=0, init=False))

    sweep_rows: Optional[list[SweepRow]] = None
    sweep_csv: Optional[str] = None
    if run.sweep_embed_dims:
        sweep_rows = []
        for d in run.sweep_embed_dims:
            try:
                cfg_d = model_cfg.model_copy(update={"embed_dim": d})
                cfg_d = ModelConfig.model_validate(cfg_d.model_dump())
            except ValueError as exc:
                raise ConfigError(f"sweep embed_dim {d}: {exc}") from exc
            run_d = run.model_copy(update={"model": cfg_d})
            destination = Path(out_dir or run.output_dir) / f"sweep_d{d}"
            outcome = run_train(run_d, out_dir=str(destination), seed=seed)
            total_d, _ = count_parameters(build_model(cfg_d, seed=0, init=False))
            sweep_rows.append(
                SweepRow(embed_dim=d, params=total_d, ap_macro=outcome.best_ap_macro)
            )
        csv_path = Path(out_dir or run.output_dir) / "sweep.csv"
        lines = ["d_e,params,ap_macro"]
        lines += [f"{r.embed_dim},{r.params},{repr(r.ap_macro)}" for r in sweep_rows]
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        sweep_csv = str(csv_path)

    return ParamsOutcome(
        total=total,
        by_module=by_module,
        mode=model_cfg.mode,
        sweep=sweep_rows,
        sweep_csv_path=sweep_csv,
    )
