"""Vision-transformer building blocks.

All functions are stateless transformations over explicit parameter bundles of
:class:`~sctfusion.autograd.Tensor`; batching is the leading axis everywhere
(``[B, tokens, dim]``). The class token always lives at the *last* sequence
position.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .configs import ModalitySpec
from .errors import ShapeError


@dataclass
class AttentionParams:
    """Q/K/V and output projections.

    The key projection carries no bias: a constant added to every key shifts
    each score row uniformly, which softmax cancels exactly, so such a bias
    could never affect any output (and its gradient would be identically zero).
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


def named_tensors(params, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk a parameter dataclass depth-first, yielding stable dotted names."""
    for f in fields(params):
        value = getattr(params, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, Tensor):
            yield name, value
        else:
            yield from named_tensors(value, prefix=f"{name}.")


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut ``[B, h, w, c]`` into flattened non-overlapping patches
    ``[B, k_p, p*p*c]``.

    Patch order is row-major over the patch grid; within a patch the pixels are
    flattened row-major as (rows, columns, channels). This layout is fixed —
    serialized models depend on it.
    """
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = images.reshape(b, gh, p, gw, p, c)
    patches = patches.transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(b, gh * gw, p * p * c)


def patch_embed(images, spec: ModalitySpec, weight: Tensor, bias: Tensor) -> Tensor:
    """Embed an image (or a batch) into ``k_p`` tokens with one shared linear map.

    Accepts ``[h, w, c]`` or ``[B, h, w, c]`` numpy arrays and returns
    ``[k_p, d]`` or ``[B, k_p, d]`` accordingly.
    """
    arr = np.asarray(images)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.shape[1:] != (spec.height, spec.width, spec.channels):
        raise ShapeError(
            f"modality '{spec.name}': image shape {arr.shape[1:]} does not match "
            f"spec {(spec.height, spec.width, spec.channels)}"
        )
    patches = Tensor(extract_patches(arr, spec.patch_size), dtype=weight.data.dtype)
    tokens = ag.linear(patches, weight, bias)
    if squeeze:
        tokens = ag.reshape(tokens, tokens.shape[1:])
    return tokens


def append_class_token(tokens: Tensor, cls: Tensor) -> Tensor:
    """Append the (shared) class token as the last sequence position."""
    if cls.ndim != 1 or cls.shape[0] != tokens.shape[-1]:
        raise ShapeError(
            f"class token shape {cls.shape} does not match token dim {tokens.shape[-1]}"
        )
    row = ag.reshape(cls, (1, cls.shape[0]))
    if tokens.ndim == 2:
        return ag.concat([tokens, row], axis=0)
    batch = tokens.shape[0]
    rows = ag.broadcast_to_leading(row, batch)
    return ag.concat([tokens, rows], axis=1)


def add_positional_embedding(seq: Tensor, pos: Optional[Tensor], enabled: bool) -> Tensor:
    """Elementwise add of a learnable per-position embedding; identity when disabled."""
    if not enabled:
        return seq
    if pos is None:
        raise ShapeError("positional embedding enabled but no table provided")
    if pos.shape != seq.shape[-2:]:
        raise ShapeError(
            f"positional table {pos.shape} does not match sequence {seq.shape[-2:]}"
        )
    return ag.add(seq, pos)


def multi_head_self_attention(
    seq: Tensor,
    params: AttentionParams,
    heads: int,
    weights_out: Optional[list] = None,
) -> Tensor:
    """Standard multi-head self-attention over ``[B, S, d]`` (or ``[S, d]``).

    Per head: scores = Q Kᵀ / sqrt(d/heads), row softmax, weighted sum of V;
    head outputs are concatenated and projected. If ``weights_out`` is given,
    the per-head attention probability arrays are appended to it.
    """
    d = seq.shape[-1]
    if d % heads:
        raise ShapeError(f"embed dim {d} not divisible by {heads} heads")
    hd = d // heads
    scale = 1.0 / np.sqrt(hd)
    q = ag.linear(seq, params.wq, params.bq)
    k = ag.matmul(seq, params.wk)
    v = ag.linear(seq, params.wv, params.bv)

    # Split the feature axis into heads: columns [h*hd, (h+1)*hd) belong to
    # head h, so reshape+permute is exactly per-head column slicing.
    lead = seq.shape[:-2]
    s = seq.shape[-2]
    n = len(lead)
    to_heads = lead + (s, heads, hd)
    head_order = tuple(range(n)) + (n + 1, n, n + 2)
    q = ag.permute(ag.reshape(q, to_heads), head_order)
    k = ag.permute(ag.reshape(k, to_heads), head_order)
    v = ag.permute(ag.reshape(v, to_heads), head_order)

    scores = ag.scale(ag.matmul(q, ag.transpose_last2(k)), scale)
    probs = ag.softmax_last_dim(scores)
    if weights_out is not None:
        moved = np.moveaxis(np.array(probs.data), -3, 0)
        weights_out.extend(moved.reshape((heads,) + lead + (s, s)))
    ctx = ag.matmul(probs, v)
    merged = ag.reshape(ag.permute(ctx, tuple(range(n)) + (n + 1, n, n + 2)), seq.shape)
    return ag.linear(merged, params.wo, params.bo)


def mlp(seq: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer feed-forward with GELU."""
    hidden = ag.gelu(ag.linear(seq, w1, b1))
    return ag.linear(hidden, w2, b2)


def stochastic_depth(
    branch: Tensor,
    rate: float,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    """Drop the whole residual branch per sample with probability ``rate``.

    Kept branches are rescaled by 1/(1-rate) so the training-time expectation
    matches the branch value; in eval mode the branch passes through unchanged.
    A 3-D branch ``[B, S, d]`` draws one mask per batch element; lower-rank
    branches count as a single sample (one draw).
    """
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"stochastic depth rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return branch
    if rng is None:
        raise ShapeError("stochastic depth in training mode needs an rng")
    batch = branch.shape[0] if branch.ndim == 3 else 1
    keep = rng.random(batch) >= rate
    values = keep.astype(branch.data.dtype) / (1.0 - rate)
    if branch.ndim == 3:
        values = values.reshape((batch,) + (1,) * (branch.ndim - 1))
    else:
        values = values.reshape((1,) * branch.ndim)
    mask = np.broadcast_to(values, branch.shape)
    return ag.mul(branch, Tensor(mask, dtype=branch.data.dtype))


def encoder_block(
    seq: Tensor,
    params: BlockParams,
    heads: int,
    drop_rate: float,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    """Pre-norm transformer encoder block with stochastic depth on both branches."""
    attn_in = ag.layer_norm(seq, params.ln1_gamma, params.ln1_beta)
    attn_out = multi_head_self_attention(attn_in, params.attn, heads)
    seq = ag.add(seq, stochastic_depth(attn_out, drop_rate, training, rng))
    mlp_in = ag.layer_norm(seq, params.ln2_gamma, params.ln2_beta)
    mlp_out = mlp(mlp_in, params.mlp_w1, params.mlp_b1, params.mlp_w2, params.mlp_b2)
    return ag.add(seq, stochastic_depth(mlp_out, drop_rate, training, rng))
