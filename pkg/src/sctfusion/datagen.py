"""Procedural multi-modal multi-label dataset: generation, on-disk format,
loading, and training-time augmentations.

Labels are designed so that some classes need cross-modal evidence: classes in
the first group leave their pattern in modality 0 only, the second group in
modality 1 only, and joint classes stamp every modality when present — but
when absent they stamp exactly one uniformly chosen modality with probability
``decoy_prob``, so no single modality can identify them reliably while the
joint observation is fully determining (at zero noise).

On-disk layout of a dataset directory:

* ``manifest.json`` — format version, modality shapes, label names, sample
  count, dtype tag ``f32le``, per-file CRC-32C checksums, generator config echo.
* ``modality_<j>.bin`` — ``M*h*w*c`` little-endian float32 values, sample-major
  then row-major (h, w, c); ``<j>`` is the 0-based modality index.
* ``labels.bin`` — ``M*l`` bytes, each 0 or 1.

Loading distinguishes failure modes: a modality payload shorter than the
manifest implies raises :class:`TruncatedPayloadError`; a labels payload of the
wrong size, an oversized payload, or any other structural disagreement raises
:class:`ManifestConsistencyError`; a content mismatch raises
:class:`ChecksumMismatchError`.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import seeding
from .configs import AugmentConfig, GeneratorConfig
from .crc32c import crc32c_hex
from .errors import (
    ChecksumMismatchError,
    ConfigError,
    ManifestConsistencyError,
    TruncatedPayloadError,
)

DATASET_FORMAT_VERSION = 1


@dataclass
class Dataset:
    """In-memory dataset with deterministic (manifest) iteration order."""

    images: list[np.ndarray]  # per modality: [M, h, w, c] float32
    labels: np.ndarray  # [M, l] uint8
    modality_names: list[str]
    label_names: list[str]
    manifest: Optional[dict] = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_labels(self) -> int:
        return self.labels.shape[1]

    def sample(self, index: int) -> tuple[list[np.ndarray], np.ndarray]:
        return [im[index] for im in self.images], self.labels[index]

    def subset(self, start: int, stop: int) -> "Dataset":
        if not 0 <= start <= stop <= len(self):
            raise ConfigError(f"subset [{start}:{stop}] out of range for {len(self)} samples")
        return Dataset(
            images=[im[start:stop] for im in self.images],
            labels=self.labels[start:stop],
            modality_names=self.modality_names,
            label_names=self.label_names,
            manifest=self.manifest,
        )

    def select_modalities(self, names: list[str]) -> "Dataset":
        index = {n: i for i, n in enumerate(self.modality_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise ConfigError(f"dataset has no modalities {missing}; have {self.modality_names}")
        picks = [index[n] for n in names]
        return Dataset(
            images=[self.images[i] for i in picks],
            labels=self.labels,
            modality_names=list(names),
            label_names=self.label_names,
            manifest=self.manifest,
        )


def _class_cell(config: GeneratorConfig, label: int, modality: int) -> tuple[slice, slice, int]:
    """Pixel rows/cols and channel owned by one class on one modality."""
    side = config.cell_side
    shape = config.modalities[modality]
    cells_w = shape.width // side
    row, col = divmod(label, cells_w)
    return (
        slice(row * side, (row + 1) * side),
        slice(col * side, (col + 1) * side),
        label % shape.channels,
    )


def generate_arrays(config: GeneratorConfig) -> tuple[list[np.ndarray], np.ndarray]:
    """Generate the dataset in memory; fully determined by ``config.seed``.

    Draw order (fixed): label Bernoullis ``[M, l]``, then joint-class decoy
    uniforms and modality picks, then per-modality pixel noise.
    """
    rng = seeding.rng_for(config.seed, seeding.DATA)
    m = config.num_samples
    l = config.num_labels
    n = len(config.modalities)
    g1 = config.groups.first_only
    g2 = config.groups.second_only
    joint = config.groups.joint

    labels = (rng.random((m, l)) < config.presence_prior).astype(np.uint8)
    decoy_u = rng.random((m, joint))
    decoy_pick = rng.integers(0, n, size=(m, joint))

    images = [
        np.zeros((m, s.height, s.width, s.channels), dtype=np.float32)
        for s in config.modalities
    ]
    amplitude = np.float32(config.amplitude)

    for k in range(l):
        if k < g1:
            stamp_modalities = [0]
        elif k < g1 + g2:
            stamp_modalities = [1]
        else:
            stamp_modalities = list(range(n))
        present = labels[:, k] == 1
        for j in stamp_modalities:
            rows, cols, ch = _class_cell(config, k, j)
            images[j][present, rows, cols, ch] += amplitude
        if k >= g1 + g2:
            kj = k - g1 - g2
            decoyed = (labels[:, k] == 0) & (decoy_u[:, kj] < config.decoy_prob)
            for j in range(n):
                sel = decoyed & (decoy_pick[:, kj] == j)
                if sel.any():
                    rows, cols, ch = _class_cell(config, k, j)
                    images[j][sel, rows, cols, ch] += amplitude

    for j in range(n):
        noise = rng.standard_normal(images[j].shape)
        if config.noise_sigma:
            images[j] += (config.noise_sigma * noise).astype(np.float32)

    return images, labels


def generate_dataset(config: GeneratorConfig, out_dir: str | Path) -> dict:
    """Generate and write a dataset directory; returns the manifest.

    The directory is assembled in a temporary sibling and moved into place, so
    an invalid config or a failed write never leaves partial output. An
    existing dataset at ``out_dir`` is replaced.
    """
    out_dir = Path(out_dir)
    images, labels = generate_arrays(config)

    tmp = out_dir.with_name(out_dir.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    files: dict[str, str] = {}
    modalities = []
    for j, (shape, arr) in enumerate(zip(config.modalities, images)):
        fname = f"modality_{j}.bin"
        raw = np.ascontiguousarray(arr, dtype="<f4")
        (tmp / fname).write_bytes(raw.tobytes())
        files[fname] = crc32c_hex(raw)
        modalities.append(
            {
                "name": shape.name,
                "height": shape.height,
                "width": shape.width,
                "channels": shape.channels,
                "file": fname,
            }
        )
    label_bytes = np.ascontiguousarray(labels, dtype=np.uint8).tobytes()
    (tmp / "labels.bin").write_bytes(label_bytes)
    files["labels.bin"] = crc32c_hex(label_bytes)

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "dtype": "f32le",
        "num_samples": config.num_samples,
        "num_modalities": len(config.modalities),
        "num_labels": config.num_labels,
        "label_names": config.resolved_label_names(),
        "modalities": modalities,
        "files": files,
        "generator": config.model_dump(),
    }
    (tmp / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    if out_dir.exists():
        shutil.rmtree(out_dir)
    tmp.rename(out_dir)
    return manifest


def manifest_checksum(dataset_dir: str | Path) -> str:
    """CRC-32C of manifest.json — a fingerprint of the whole dataset, since the
    manifest embeds every payload checksum."""
    return crc32c_hex(Path(dataset_dir, "manifest.json").read_bytes())


def load_dataset(path: str | Path) -> Dataset:
    """Load and fully validate a dataset directory."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise ManifestConsistencyError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ManifestConsistencyError(
            f"unsupported dataset format version {manifest.get('format_version')}"
        )
    if manifest.get("dtype") != "f32le":
        raise ManifestConsistencyError(f"unsupported dtype tag {manifest.get('dtype')!r}")
    m = int(manifest["num_samples"])
    l = int(manifest["num_labels"])
    if len(manifest["modalities"]) != int(manifest["num_modalities"]):
        raise ManifestConsistencyError(
            f"manifest lists {len(manifest['modalities'])} modalities but declares "
            f"num_modalities={manifest['num_modalities']}"
        )

    def checked_read(fname: str, expected_bytes: int, truncation_is_error: bool) -> bytes:
        fpath = path / fname
        if not fpath.is_file():
            raise ManifestConsistencyError(f"payload file {fname} missing")
        raw = fpath.read_bytes()
        if len(raw) < expected_bytes and truncation_is_error:
            raise TruncatedPayloadError(
                f"{fname}: {len(raw)} bytes on disk, manifest implies {expected_bytes}"
            )
        if len(raw) != expected_bytes:
            raise ManifestConsistencyError(
                f"{fname}: {len(raw)} bytes on disk, manifest implies {expected_bytes}"
            )
        declared = manifest["files"].get(fname)
        if declared is None:
            raise ManifestConsistencyError(f"{fname} has no checksum entry in manifest")
        actual = crc32c_hex(raw)
        if actual != declared:
            raise ChecksumMismatchError(
                f"{fname}: CRC-32C {actual} does not match manifest {declared}"
            )
        return raw

    images = []
    names = []
    for j, mod in enumerate(manifest["modalities"]):
        fname = mod["file"]
        shape = (m, int(mod["height"]), int(mod["width"]), int(mod["channels"]))
        expected = int(np.prod(shape)) * 4
        raw = checked_read(fname, expected, truncation_is_error=True)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        images.append(arr)
        names.append(mod["name"])

    raw = checked_read("labels.bin", m * l, truncation_is_error=False)
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(m, l)
    bad = np.setdiff1d(np.unique(labels), [0, 1])
    if bad.size:
        raise ManifestConsistencyError(f"labels.bin contains values {bad.tolist()}, expected 0/1")
    label_names = manifest.get("label_names") or [f"class_{k:02d}" for k in range(l)]
    if len(label_names) != l:
        raise ManifestConsistencyError(
            f"{len(label_names)} label names for {l} labels in manifest"
        )
    return Dataset(
        images=images,
        labels=np.array(labels),
        modality_names=names,
        label_names=list(label_names),
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------


def _shift2d(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero padding (crop-style augmentation)."""
    out = np.zeros_like(image)
    h, w = image.shape[:2]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def augment_sample(
    images: list[np.ndarray],
    config: AugmentConfig,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Training-time augmentation of one sample's modality images.

    In order: (1) sensor drop — each modality is zeroed with probability
    ``sensor_drop_prob``, except that when all would drop, one uniformly
    pre-drawn modality is retained; (2) horizontal and vertical flips, each
    with probability 0.5, drawn per modality; (3) zero-padded integer shift
    drawn uniformly from [-max_shift, max_shift]^2 per modality. Labels are
    untouched by construction (they are not an argument).
    """
    n = len(images)
    for im in images:
        if config.max_shift >= min(im.shape[0], im.shape[1]):
            raise ConfigError(
                f"max_shift {config.max_shift} must be smaller than the image "
                f"side min {min(im.shape[0], im.shape[1])}"
            )
    dropped = rng.random(n) < config.sensor_drop_prob
    retained = int(rng.integers(0, n))
    if dropped.all():
        dropped[retained] = False
    flips = rng.random((n, 2)) < 0.5 if config.flip else np.zeros((n, 2), dtype=bool)
    if config.max_shift > 0:
        shifts = rng.integers(-config.max_shift, config.max_shift + 1, size=(n, 2))
    else:
        shifts = np.zeros((n, 2), dtype=np.int64)

    out = []
    for j, im in enumerate(images):
        if dropped[j]:
            out.append(np.zeros_like(im))
            continue
        a = im
        if flips[j, 0]:
            a = a[:, ::-1]
        if flips[j, 1]:
            a = a[::-1, :]
        dy, dx = int(shifts[j, 0]), int(shifts[j, 1])
        if dy or dx:
            a = _shift2d(a, dy, dx)
        out.append(np.ascontiguousarray(a))
    return out
