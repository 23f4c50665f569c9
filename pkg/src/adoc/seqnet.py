"""Transformer encoder over the feature sequence, with per-domain bottleneck
adapters and classifier heads.

Sublayers use the post-norm arrangement (normalize after the residual add),
and the active domain's adapter runs right after each sublayer's norm. An
adapter down-projects, applies ReLU, up-projects, and adds the result back
onto its input; a zero up-projection therefore makes it an exact identity.
Attention, feed-forward and the input projection are shared across domains;
layer norms, adapters and the classifier head are not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import RoutingError
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    layer_norm,
    log_softmax_rows,
    matmul,
    narrow,
    relu,
    softmax_rows,
    transpose,
)


def positional_encoding(length: int, d_model: int) -> Tensor:
    """Fixed sinusoidal position signal, [length, d_model]."""
    if length < 1:
        raise ShapeError(f"positional_encoding needs length >= 1, got {length}")
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angles = pos / np.power(10000.0, i / d_model)
    enc = np.zeros((length, d_model))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return Tensor(enc)


@dataclass
class LayerNorms:
    gain1: Tensor
    bias1: Tensor
    gain2: Tensor
    bias2: Tensor


@dataclass
class BottleneckAdapter:
    """Down-project, ReLU, up-project, plus the skip back onto the input."""

    w_down: Tensor  # [d_model, d_bottleneck]
    b_down: Tensor
    w_up: Tensor    # [d_bottleneck, d_model]
    b_up: Tensor
    domain_id: int


@dataclass
class ClassifierHead:
    weight: Tensor  # [d_model, alphabet + 1]
    bias: Tensor
    domain_id: int


@dataclass
class EncoderLayerParams:
    """Shared attention/feed-forward weights plus per-domain norm banks."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    num_heads: int
    norms: dict[int, LayerNorms] = field(default_factory=dict)


def multi_head_attention(x: Tensor, params: EncoderLayerParams,
                         return_weights: bool = False):
    """Self-attention over [T, d_model]; optionally also the [h, T, T] weights."""
    t, d_model = x.shape
    if d_model != params.wq.shape[0]:
        raise ShapeError(f"attention expects width {params.wq.shape[0]}, got {d_model}")
    heads = params.num_heads
    d_head = d_model // heads
    q = matmul(x, params.wq) + params.bq
    k = matmul(x, params.wk) + params.bk
    v = matmul(x, params.wv) + params.bv
    scale = 1.0 / np.sqrt(d_head)
    outputs = []
    weights = []
    for h in range(heads):
        qh = narrow(q, 1, h * d_head, d_head)
        kh = narrow(k, 1, h * d_head, d_head)
        vh = narrow(v, 1, h * d_head, d_head)
        attn = softmax_rows(matmul(qh, transpose(kh)) * scale)
        weights.append(attn)
        outputs.append(matmul(attn, vh))
    merged = concat(outputs, axis=1) if heads > 1 else outputs[0]
    out = matmul(merged, params.wo) + params.bo
    if return_weights:
        return out, weights
    return out


def bottleneck_adapter_forward(x: Tensor, adapter: BottleneckAdapter) -> Tensor:
    if x.shape[-1] != adapter.w_down.shape[0]:
        raise ShapeError(
            f"adapter expects width {adapter.w_down.shape[0]}, got {x.shape[-1]}"
        )
    h = relu(matmul(x, adapter.w_down) + adapter.b_down)
    return x + (matmul(h, adapter.w_up) + adapter.b_up)


def encoder_layer_forward(x: Tensor, params: EncoderLayerParams,
                          adapters: tuple[BottleneckAdapter, BottleneckAdapter],
                          domain: int) -> Tensor:
    a1, a2 = adapters
    if a1.domain_id != domain or a2.domain_id != domain:
        raise RoutingError(
            f"adapters belong to domains {a1.domain_id}/{a2.domain_id}, "
            f"forward is for domain {domain}"
        )
    norms = params.norms.get(domain)
    if norms is None:
        raise RoutingError(f"encoder layer has no norm bank for domain {domain}")

    h = layer_norm(x + multi_head_attention(x, params), norms.gain1, norms.bias1)
    h = bottleneck_adapter_forward(h, a1)
    ff = matmul(relu(matmul(h, params.w1) + params.b1), params.w2) + params.b2
    out = layer_norm(h + ff, norms.gain2, norms.bias2)
    return bottleneck_adapter_forward(out, a2)


@dataclass
class SequenceNetParams:
    in_proj_w: Tensor   # [C', d_model]
    in_proj_b: Tensor
    layers: list[EncoderLayerParams]
    adapters: dict[int, list[tuple[BottleneckAdapter, BottleneckAdapter]]] = field(default_factory=dict)
    classifiers: dict[int, ClassifierHead] = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return self.in_proj_w.shape[1]


def init_seqnet(feature_channels: int, d_model: int, d_ff: int, num_layers: int,
                num_heads: int, rng: np.random.Generator) -> SequenceNetParams:
    if d_model % num_heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by {num_heads} heads")

    def glorot(n_in, n_out):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out)),
                      requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    layers = []
    for _ in range(num_layers):
        layers.append(EncoderLayerParams(
            wq=glorot(d_model, d_model), bq=zeros(d_model),
            wk=glorot(d_model, d_model), bk=zeros(d_model),
            wv=glorot(d_model, d_model), bv=zeros(d_model),
            wo=glorot(d_model, d_model), bo=zeros(d_model),
            w1=glorot(d_model, d_ff), b1=zeros(d_ff),
            w2=glorot(d_ff, d_model), b2=zeros(d_model),
            num_heads=num_heads,
        ))
    return SequenceNetParams(
        in_proj_w=glorot(feature_channels, d_model),
        in_proj_b=zeros(d_model),
        layers=layers,
    )


def sequence_logits(features: Tensor, net: SequenceNetParams, domain: int) -> Tensor:
    """[W', C'] features to [W', alphabet + 1] per-timestep log-probabilities."""
    if features.data.ndim != 2 or features.shape[1] != net.in_proj_w.shape[0]:
        raise ShapeError(
            f"expected [T, {net.in_proj_w.shape[0]}] features, got {features.shape}"
        )
    layer_adapters = net.adapters.get(domain)
    head = net.classifiers.get(domain)
    if layer_adapters is None or head is None:
        raise RoutingError(f"domain {domain} is not registered")
    if head.domain_id != domain:
        raise RoutingError(f"classifier belongs to domain {head.domain_id}")

    x = matmul(features, net.in_proj_w) + net.in_proj_b
    x = x + positional_encoding(features.shape[0], net.d_model)
    for params, adapters in zip(net.layers, layer_adapters):
        x = encoder_layer_forward(x, params, adapters, domain)
    return log_softmax_rows(matmul(x, head.weight) + head.bias)
