"""Parameterized transformer building blocks.

Parameter containers are plain dataclasses of :class:`~titn.tensor.Tensor`
leaves; the block functions take ``(x, params)`` and build the graph.
Blocks follow the pre-norm residual layout used by :mod:`titn.model`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator, Optional

import numpy as np

from titn import tensor as T
from titn.tensor import ShapeError, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class LinearParams:
    w: Tensor  # [d_in, d_out]
    b: Tensor  # [d_out]

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, dtype=np.float64) -> "LinearParams":
        return cls(
            w=_param(trunc_normal(rng, (d_in, d_out), dtype=dtype)),
            b=_param(np.zeros(d_out, dtype=dtype)),
        )

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]


@dataclass
class MultiHeadAttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"d_model={d} is not divisible by heads={self.heads}")

    @classmethod
    def init(cls, rng, d_model: int, heads: int, dtype=np.float64) -> "MultiHeadAttentionParams":
        def w():
            return _param(trunc_normal(rng, (d_model, d_model), dtype=dtype))

        return cls(w_q=w(), w_k=w(), w_v=w(), w_o=w(), heads=heads)

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams

    def __post_init__(self):
        if self.fc1.d_out != self.fc2.d_in:
            raise ValueError(f"fc1 width {self.fc1.d_out} != fc2 input {self.fc2.d_in}")

    @classmethod
    def init(cls, rng, d: int, ratio: int = 4, dtype=np.float64) -> "MlpParams":
        return cls(LinearParams.init(rng, d, ratio * d, dtype), LinearParams.init(rng, ratio * d, d, dtype))


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, d: int, eps: float = 1e-5, dtype=np.float64) -> "LayerNormParams":
        return cls(_param(np.ones(d, dtype=dtype)), _param(np.zeros(d, dtype=dtype)), eps)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every trainable leaf under ``obj``.

    Walks dataclasses, lists and tuples in declaration order.
    """
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def linear(x, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.d_in:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {p.d_in}")
    return T.matmul(x, p.w) + p.b


def attention(q, k, v, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape} != key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key tokens {k.shape} != value tokens {v.shape}")
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return T.transpose(x.reshape(*lead, t, heads, d // heads), (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    n = len(lead)
    return T.transpose(x, (*range(n), n + 1, n, n + 2)).reshape(*lead, t, h * dk)


def multi_head_attention(x, p: MultiHeadAttentionParams, return_weights: bool = False):
    """Self-attention over tokens of ``x`` [..., T, d_model].

    Head i uses column block i of the fused projections; head outputs are
    concatenated and mapped by ``w_o``.
    """
    if x.shape[-1] != p.d_model:
        raise ShapeError(f"multi_head_attention: input width {x.shape[-1]} != d_model {p.d_model}")
    q = _split_heads(T.matmul(x, p.w_q), p.heads)
    k = _split_heads(T.matmul(x, p.w_k), p.heads)
    v = _split_heads(T.matmul(x, p.w_v), p.heads)
    out, weights = attention(q, k, v, return_weights=True)
    out = T.matmul(_merge_heads(out), p.w_o)
    return (out, weights) if return_weights else out


def mlp(x, p: MlpParams) -> Tensor:
    return linear(T.gelu(linear(x, p.fc1)), p.fc2)


def layer_norm(x, p: LayerNormParams, pre_affine: Optional[list] = None) -> Tensor:
    """Per-token normalization over the last axis, then scale and shift.

    If ``pre_affine`` is a list, the normalized tensor is appended to it.
    """
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"layer_norm: input width {x.shape[-1]} != {p.gamma.shape[0]}")
    xhat = T.normalize(x, p.eps)
    if pre_affine is not None:
        pre_affine.append(xhat)
    return xhat * p.gamma + p.beta


@dataclass
class TransformerBlockParams:
    """Pre-norm attention + MLP pair with residuals."""

    norm1: LayerNormParams
    attn: MultiHeadAttentionParams
    norm2: LayerNormParams
    mlp: MlpParams

    @classmethod
    def init(cls, rng, d: int, heads: int, ratio: int, dtype=np.float64) -> "TransformerBlockParams":
        return cls(
            norm1=LayerNormParams.init(d, dtype=dtype),
            attn=MultiHeadAttentionParams.init(rng, d, heads, dtype),
            norm2=LayerNormParams.init(d, dtype=dtype),
            mlp=MlpParams.init(rng, d, ratio, dtype),
        )


def transformer_block(x, p: TransformerBlockParams) -> Tensor:
    x = x + multi_head_attention(layer_norm(x, p.norm1), p.attn)
    return x + mlp(layer_norm(x, p.norm2), p.mlp)
