"""Model assembly: class-token-synchronized fusion, early fusion, single-modality.

A :class:`Model` owns its parameters as named :class:`~sctfusion.autograd.Tensor`
objects and exposes one ``forward`` over a list of per-modality image batches.
In fusion mode, every encoder round ends with the per-modality class tokens
being concatenated, mapped through a trainable linear layer, and written back
into every modality's class-token slot, so all streams continue from the same
synchronized token; the final synchronized token feeds the classification
layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import blocks, seeding
from .autograd import Tensor
from .blocks import AttentionParams, BlockParams, named_tensors
from .configs import ModalitySpec, ModelConfig
from .errors import CheckpointError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class FusionParams:
    """Linear map from the concatenated class tokens back to one token."""

    weight: Tensor  # [d, N*d]
    bias: Tensor  # [d]


@dataclass
class StreamParams:
    """Everything one modality-specific encoder owns."""

    patch_weight: Tensor
    patch_bias: Tensor
    cls_token: Tensor
    pos_embed: Optional[Tensor]
    blocks: list[BlockParams]


class Model:
    def __init__(
        self,
        config: ModelConfig,
        streams: list[StreamParams],
        fusion: list[FusionParams],
        head_weight: Tensor,
        head_bias: Tensor,
        dtype=np.float32,
    ):
        self.config = config
        self.streams = streams
        self.fusion = fusion
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.dtype = dtype

    # -- parameter bookkeeping ----------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        """Stable name -> tensor mapping in build order (checkpoint order)."""
        out: dict[str, Tensor] = {}
        for i, stream in enumerate(self.streams):
            prefix = f"streams.{i}."
            out[prefix + "patch_weight"] = stream.patch_weight
            out[prefix + "patch_bias"] = stream.patch_bias
            out[prefix + "cls_token"] = stream.cls_token
            if stream.pos_embed is not None:
                out[prefix + "pos_embed"] = stream.pos_embed
            for b, blk in enumerate(stream.blocks):
                for name, t in named_tensors(blk, prefix=f"{prefix}blocks.{b}."):
                    out[name] = t
        for r, fp in enumerate(self.fusion):
            out[f"fusion.{r}.weight"] = fp.weight
            out[f"fusion.{r}.bias"] = fp.bias
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def stream_specs(self) -> list[ModalitySpec]:
        """Per-stream geometry: the configured modalities, or the channel-stacked
        pseudo-modality in early-fusion mode."""
        cfg = self.config
        if cfg.mode == "early":
            ref = cfg.modalities[0]
            return [
                ModalitySpec(
                    name="stacked",
                    height=ref.height,
                    width=ref.width,
                    channels=sum(m.channels for m in cfg.modalities),
                    patch_size=ref.patch_size,
                )
            ]
        return list(cfg.modalities)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        images: Sequence[np.ndarray],
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        sd_rate: Optional[float] = None,
        sync_trace: Optional[list] = None,
    ) -> Tensor:
        """Compute logits ``[B, num_labels]`` (or ``[num_labels]`` for a single
        unbatched sample).

        ``images`` holds one array per configured modality, each ``[h, w, c]``
        or ``[B, h, w, c]``. ``sync_trace``, when given, receives one entry per
        fusion round: the list of per-modality class-token arrays as stored in
        each stream after synchronization.
        """
        cfg = self.config
        if len(images) != len(cfg.modalities):
            raise ShapeError(
                f"expected {len(cfg.modalities)} modality arrays, got {len(images)}"
            )
        arrays = [np.asarray(im) for im in images]
        dims = {a.ndim for a in arrays}
        if dims - {3, 4} or len(dims) != 1:
            raise ShapeError(f"modality arrays must all be [h,w,c] or [B,h,w,c], got ndims {sorted(dims)}")
        squeeze = arrays[0].ndim == 3
        if squeeze:
            arrays = [a[None] for a in arrays]
        batches = {a.shape[0] for a in arrays}
        if len(batches) != 1:
            raise ShapeError(f"modalities disagree on batch size: {sorted(batches)}")
        for spec, a in zip(cfg.modalities, arrays):
            if a.shape[1:] != (spec.height, spec.width, spec.channels):
                raise ShapeError(
                    f"modality '{spec.name}': image shape {a.shape[1:]} does not match "
                    f"configured {(spec.height, spec.width, spec.channels)}"
                )
        rate = cfg.sd_rate if sd_rate is None else sd_rate

        if cfg.mode == "early":
            arrays = [np.concatenate(arrays, axis=-1)]

        specs = self.stream_specs()
        seqs = []
        for spec, stream, arr in zip(specs, self.streams, arrays):
            tokens = blocks.patch_embed(arr, spec, stream.patch_weight, stream.patch_bias)
            seq = blocks.append_class_token(tokens, stream.cls_token)
            seq = blocks.add_positional_embedding(seq, stream.pos_embed, cfg.use_pos_embed)
            seqs.append(seq)

        if cfg.mode in ("early", "single"):
            seq = seqs[0]
            for blk in self.streams[0].blocks:
                seq = blocks.encoder_block(seq, blk, cfg.heads, rate, training, rng)
            final = ag.reshape(
                ag.slice_axis(seq, -2, seq.shape[-2] - 1, seq.shape[-2]),
                (seq.shape[0], seq.shape[-1]),
            )
        else:
            batch = arrays[0].shape[0]
            final = None
            for r in range(cfg.depth):
                seqs = [
                    blocks.encoder_block(seq, stream.blocks[r], cfg.heads, rate, training, rng)
                    for seq, stream in zip(seqs, self.streams)
                ]
                cls_tokens = [
                    ag.reshape(
                        ag.slice_axis(seq, -2, seq.shape[-2] - 1, seq.shape[-2]),
                        (batch, cfg.embed_dim),
                    )
                    for seq in seqs
                ]
                fused = fuse_class_tokens(cls_tokens, self.fusion[0 if cfg.share_fusion else r])
                fused_row = ag.reshape(fused, (batch, 1, cfg.embed_dim))
                seqs = [
                    ag.concat(
                        [ag.slice_axis(seq, -2, 0, seq.shape[-2] - 1), fused_row], axis=-2
                    )
                    for seq in seqs
                ]
                if sync_trace is not None:
                    sync_trace.append(
                        [np.array(seq.data[:, -1, :]) for seq in seqs]
                    )
                final = fused

        logits = ag.linear(final, self.head_weight, self.head_bias)
        if squeeze:
            logits = ag.reshape(logits, (cfg.num_labels,))
        return logits


def fuse_class_tokens(cls_tokens: Sequence[Tensor], params: FusionParams) -> Tensor:
    """Map the concatenation of N class tokens through the trainable linear
    fusion layer: ``z = W @ concat(tokens) + b``.

    Accepts a list of ``[d]`` vectors or ``[B, d]`` batches and returns the
    same rank.
    """
    d = params.weight.shape[0]
    n = params.weight.shape[1] // d
    if params.weight.shape != (d, n * d):
        raise ShapeError(f"fusion weight shape {params.weight.shape} is not [d, N*d]")
    if len(cls_tokens) != n:
        raise ShapeError(f"expected {n} class tokens, got {len(cls_tokens)}")
    ndims = {t.ndim for t in cls_tokens}
    if len(ndims) != 1 or ndims - {1, 2}:
        raise ShapeError("class tokens must all be [d] or [B, d]")
    vector_in = cls_tokens[0].ndim == 1
    for t in cls_tokens:
        if t.shape[-1] != d:
            raise ShapeError(f"class token dim {t.shape[-1]} does not match fusion dim {d}")
    if vector_in:
        cls_tokens = [ag.reshape(t, (1, d)) for t in cls_tokens]
    stacked = ag.concat(list(cls_tokens), axis=-1)
    fused = ag.linear(stacked, ag.transpose_last2(params.weight), params.bias)
    if vector_in:
        fused = ag.reshape(fused, (d,))
    return fused


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _param(data, dtype) -> Tensor:
    # np.array (not asarray): a parameter must own its storage — sharing one
    # buffer across tensors would couple their updates and perturbations.
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, dtype=dtype)


def build_model(
    config: ModelConfig,
    seed: int = 0,
    dtype=np.float32,
    init: bool = True,
) -> Model:
    """Construct a model with deterministic initialization.

    Draws come from the init stream of ``seed`` in build order: linear weights
    are Xavier-uniform, biases zero, class tokens and positional tables
    normal(0, 0.02), layer norms (1, 0). The fusion layer starts as exact
    block-averaging (``W = [I/N | ... | I/N]``, b = 0) so the first
    synchronized token is the mean of the modality class tokens. With
    ``init=False`` all parameters are zeros (used when loading checkpoints).
    """
    rng = seeding.rng_for(seed, seeding.INIT)
    d = config.embed_dim
    hidden = config.mlp_hidden_dim

    def linear(fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        if init:
            w = _xavier(rng, fan_in, fan_out, dtype)
        else:
            w = np.zeros((fan_in, fan_out), dtype=dtype)
        return _param(w, dtype), _param(np.zeros(fan_out), dtype)

    def small_normal(shape) -> Tensor:
        if init:
            return _param(rng.normal(0.0, 0.02, size=shape), dtype)
        return _param(np.zeros(shape), dtype)

    if config.mode == "early":
        ref = config.modalities[0]
        specs = [
            ModalitySpec(
                name="stacked",
                height=ref.height,
                width=ref.width,
                channels=sum(m.channels for m in config.modalities),
                patch_size=ref.patch_size,
            )
        ]
    else:
        specs = list(config.modalities)

    streams = []
    for spec in specs:
        patch_w, patch_b = linear(spec.patch_dim, d)
        cls = small_normal((d,))
        pos = small_normal((spec.num_patches + 1, d)) if config.use_pos_embed else None
        blks = []
        for _ in range(config.depth):
            wq, bq = linear(d, d)
            wk = _param(_xavier(rng, d, d, dtype) if init else np.zeros((d, d)), dtype)
            wv, bv = linear(d, d)
            wo, bo = linear(d, d)
            w1, b1 = linear(d, hidden)
            w2, b2 = linear(hidden, d)
            blks.append(
                BlockParams(
                    ln1_gamma=_param(np.ones(d), dtype),
                    ln1_beta=_param(np.zeros(d), dtype),
                    attn=AttentionParams(wq, bq, wk, wv, bv, wo, bo),
                    ln2_gamma=_param(np.ones(d), dtype),
                    ln2_beta=_param(np.zeros(d), dtype),
                    mlp_w1=w1,
                    mlp_b1=b1,
                    mlp_w2=w2,
                    mlp_b2=b2,
                )
            )
        streams.append(
            StreamParams(
                patch_weight=patch_w,
                patch_bias=patch_b,
                cls_token=cls,
                pos_embed=pos,
                blocks=blks,
            )
        )

    fusion: list[FusionParams] = []
    if config.mode == "sct":
        n = len(config.modalities)
        rounds = 1 if config.share_fusion else config.depth
        averaging = np.concatenate([np.eye(d) / n] * n, axis=1)
        for _ in range(rounds):
            w = averaging if init else np.zeros((d, n * d))
            fusion.append(
                FusionParams(weight=_param(w, dtype), bias=_param(np.zeros(d), dtype))
            )

    head_w, head_b = linear(d, config.num_labels)
    return Model(config, streams, fusion, head_w, head_b, dtype=dtype)


def count_parameters(model: Model) -> tuple[int, dict[str, int]]:
    """Exact count of trainable scalars, with a per-module breakdown keyed by
    the first two name components (e.g. ``streams.0``, ``fusion``, ``head``)."""
    breakdown: dict[str, int] = {}
    total = 0
    for name, tensor in model.named_parameters().items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "streams" else parts[0]
        breakdown[key] = breakdown.get(key, 0) + tensor.data.size
        total += tensor.data.size
    return total, breakdown


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: Model,
    epoch: int = 0,
    seed: Optional[int] = None,
    optimizer_state: Optional[dict] = None,
) -> None:
    """Write a checkpoint: one JSON header line, then raw little-endian float32
    payloads in manifest order (offsets are relative to the payload start).

    Float32 models round-trip bitwise. Optimizer state, when given, must be
    ``{"step": int, "m": {name: array}, "v": {name: array}}``.
    """
    params = model.named_parameters()
    entries = []
    payloads = []
    offset = 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4")
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        payloads.append(raw.tobytes())
        offset += raw.nbytes

    optimizer_header = None
    if optimizer_state is not None:
        opt_entries = []
        for kind in ("m", "v"):
            for name in params:
                raw = np.ascontiguousarray(optimizer_state[kind][name], dtype="<f4")
                opt_entries.append(
                    {"name": f"{kind}.{name}", "shape": list(raw.shape), "offset": offset}
                )
                payloads.append(raw.tobytes())
                offset += raw.nbytes
        optimizer_header = {"step": int(optimizer_state["step"]), "tensors": opt_entries}

    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": "f32le",
        "config": model.config.model_dump(),
        "epoch": int(epoch),
        "seed": seed,
        "params": entries,
        "optimizer": optimizer_header,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.write(b"\n")
        for chunk in payloads:
            fh.write(chunk)
    tmp.replace(path)


@dataclass
class LoadedCheckpoint:
    model: Model
    epoch: int
    seed: Optional[int]
    optimizer_state: Optional[dict]


def load_checkpoint(path: str | Path, dtype=np.float32) -> LoadedCheckpoint:
    """Rebuild a model (and optional optimizer state) from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")

    config = ModelConfig.model_validate(header["config"])
    model = build_model(config, seed=0, dtype=dtype, init=False)
    params = model.named_parameters()
    manifest = {e["name"]: e for e in header["params"]}
    if set(manifest) != set(params):
        missing = sorted(set(params) - set(manifest))
        extra = sorted(set(manifest) - set(params))
        raise CheckpointError(f"parameter manifest mismatch: missing {missing}, extra {extra}")

    def read_array(entry) -> np.ndarray:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(payload):
            raise CheckpointError(
                f"payload truncated: '{entry['name']}' needs bytes [{start}, {stop}), "
                f"have {len(payload)}"
            )
        return np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)

    for name, tensor in params.items():
        arr = read_array(manifest[name]).astype(dtype)
        if arr.shape != tensor.shape:
            raise CheckpointError(
                f"'{name}': checkpoint shape {arr.shape} != model shape {tensor.shape}"
            )
        tensor.data = np.array(arr, dtype=dtype)

    optimizer_state = None
    if header.get("optimizer"):
        opt = header["optimizer"]
        tensors = {e["name"]: read_array(e) for e in opt["tensors"]}
        optimizer_state = {
            "step": int(opt["step"]),
            "m": {n[2:]: np.array(t, dtype=dtype) for n, t in tensors.items() if n.startswith("m.")},
            "v": {n[2:]: np.array(t, dtype=dtype) for n, t in tensors.items() if n.startswith("v.")},
        }
    return LoadedCheckpoint(
        model=model,
        epoch=int(header.get("epoch", 0)),
        seed=header.get("seed"),
        optimizer_state=optimizer_state,
    )
