"""Reusable neural blocks: attention, multi-head attention, FFN/layer-norm
sublayers, parameter initialization, and the classification losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


PROB_CLAMP = 1e-7  # keeps focal-loss gradients finite


@dataclass
class FocalConfig:
    """Balance/focusing parameters for the focal loss."""

    alpha_f: float = 0.5
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha_f <= 1.0:
            raise ConfigError(f"focal alpha_f must be in [0,1], got {self.alpha_f}")
        if self.gamma < 0.0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")


# ---------------------------------------------------------------------------
# parameter containers


class ParamSet:
    """Flat name -> Tensor registry for one model's learnable parameters."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def new(self, name: str, array) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params.keys())

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, p in self._params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ShapeError(f"checkpoint shape {a.shape} != {p.data.shape} for {name!r}")
            p.data = np.ascontiguousarray(a)


def scaled_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention: softmax(q kT / sqrt(d)) v."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention: need 2-D inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention: query dim {q.shape} != key dim {k.shape}")
    if k.shape[0] != v.shape[0] or k.shape[0] < 1:
        raise ShapeError(f"attention: key/value rows mismatch {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[1])
    probs = T.softmax(T.mul(T.matmul(q, T.transpose(k)), scale), axis=1)
    out = T.matmul(probs, v)
    if return_weights:
        return out, probs.data.copy()
    return out


@dataclass
class AttentionParams:
    """Per-head projections stacked as 3-D tensors plus the output projection."""

    wq: Tensor  # [m, D, D/m]
    wk: Tensor  # [m, D, D/m]
    wv: Tensor  # [m, D, D/m]
    wo: Tensor  # [D, D]
    heads: int
    dim: int

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"model dim {self.dim} not divisible by {self.heads} heads")


def init_attention(params: ParamSet, prefix: str, dim: int, heads: int,
                   rng: np.random.Generator, zero_out: bool = False) -> AttentionParams:
    if dim % heads != 0:
        raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
    dk = dim // heads
    mk = lambda nm: params.new(f"{prefix}.{nm}",
                               scaled_uniform(rng, (heads, dim, dk), dim, dk))
    wq, wk, wv = mk("wq"), mk("wk"), mk("wv")
    wo_arr = np.zeros((dim, dim)) if zero_out else scaled_uniform(rng, (dim, dim), dim, dim)
    wo = params.new(f"{prefix}.wo", wo_arr)
    return AttentionParams(wq, wk, wv, wo, heads, dim)


def multi_head_attention(p: AttentionParams, q: Tensor, k: Tensor, v: Tensor,
                         return_weights: bool = False):
    """Concat of per-head attentions on projected inputs, then output-projected.

    With return_weights, also gives the head-averaged attention matrix
    [n_q, n_k] as a plain array (for the attention-dump CLI).
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim != 2 or t.shape[1] != p.dim:
            raise ShapeError(f"multi_head_attention: {name} shape {t.shape} != [*, {p.dim}]")
    m = p.heads
    dk = p.dim // m
    qh = T.matmul(T.expand0(q, m), p.wq)            # [m, nq, dk]
    kh = T.matmul(T.expand0(k, m), p.wk)            # [m, nk, dk]
    vh = T.matmul(T.expand0(v, m), p.wv)            # [m, nk, dk]
    scores = T.mul(T.matmul(qh, T.permute(kh, (0, 2, 1))), 1.0 / math.sqrt(dk))
    probs = T.softmax(scores, axis=2)               # [m, nq, nk]
    ctx = T.matmul(probs, vh)                       # [m, nq, dk]
    merged = T.reshape(T.permute(ctx, (1, 0, 2)), (q.shape[0], p.dim))
    out = T.matmul(merged, p.wo)
    if return_weights:
        return out, probs.data.mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# feed-forward / layer norm


@dataclass
class LayerNormParams:
    scale: Tensor  # [d]
    shift: Tensor  # [d]
    eps: float = 1e-5


def init_layer_norm(params: ParamSet, prefix: str, dim: int) -> LayerNormParams:
    return LayerNormParams(
        params.new(f"{prefix}.scale", np.ones(dim)),
        params.new(f"{prefix}.shift", np.zeros(dim)),
    )


def layer_norm(p: LayerNormParams, x: Tensor) -> Tensor:
    """Per-row normalization over the last axis of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm: need 2-D, got {x.shape}")
    d = x.shape[1]
    mu = T.mul(T.sum_axis(x, 1), 1.0 / d)
    xc = T.shift_rows(x, T.neg(mu))
    var = T.mul(T.sum_axis(T.mul(xc, xc), 1), 1.0 / d)
    inv = T.power(T.add(var, p.eps), -0.5)
    return T.add_rowvec(T.mul_rowvec(T.scale_rows(xc, inv), p.scale), p.shift)


@dataclass
class FfnParams:
    """Two linear layers plus the post-residual layer norm of the sublayer."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln: LayerNormParams
    activation: str = "gelu"


def init_ffn(params: ParamSet, prefix: str, dim: int, hidden: int,
             rng: np.random.Generator, activation: str = "gelu") -> FfnParams:
    if hidden < 1:
        raise ConfigError(f"ffn hidden width must be >= 1, got {hidden}")
    return FfnParams(
        params.new(f"{prefix}.w1", scaled_uniform(rng, (dim, hidden), dim, hidden)),
        params.new(f"{prefix}.b1", np.zeros(hidden)),
        params.new(f"{prefix}.w2", scaled_uniform(rng, (hidden, dim), hidden, dim)),
        params.new(f"{prefix}.b2", np.zeros(dim)),
        init_layer_norm(params, f"{prefix}.ln", dim),
        activation,
    )


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return T.gelu(x)
    if kind == "relu":
        return T.relu(x)
    raise ConfigError(f"unknown activation {kind!r}")


def ffn_block(p: FfnParams, x: Tensor) -> Tensor:
    """Transformer FFN sublayer: x + FFN(x), then layer norm."""
    h = _activate(T.add_rowvec(T.matmul(x, p.w1), p.b1), p.activation)
    y = T.add_rowvec(T.matmul(h, p.w2), p.b2)
    return layer_norm(p.ln, T.add(x, y))


@dataclass
class MlpParams:
    """Plain multi-layer perceptron for prediction heads (no residual)."""

    weights: list  # list of (w, b) Tensor pairs
    activation: str = "relu"


def init_mlp(params: ParamSet, prefix: str, dims: list, rng: np.random.Generator,
             activation: str = "relu", zero_last: bool = False,
             last_bias_scale: float = 0.0) -> MlpParams:
    """zero_last zeroes the final weight matrix so the head starts as its bias
    row; last_bias_scale > 0 draws that bias randomly (keeps heads whose
    outputs get length-normalized away from the zero-vector singularity)."""
    layers = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        warr = np.zeros((din, dout)) if (zero_last and last) else scaled_uniform(
            rng, (din, dout), din, dout)
        barr = (rng.uniform(-last_bias_scale, last_bias_scale, size=dout)
                if (last and last_bias_scale) else np.zeros(dout))
        layers.append((params.new(f"{prefix}.w{i}", warr),
                       params.new(f"{prefix}.b{i}", barr)))
    return MlpParams(layers, activation)


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    for i, (w, b) in enumerate(p.weights):
        x = T.add_rowvec(T.matmul(x, w), b)
        if i < len(p.weights) - 1:
            x = _activate(x, p.activation)
    return x


# ---------------------------------------------------------------------------
# classification losses


def focal_loss(p, target, cfg: FocalConfig):
    """Focal loss on probabilities; elementwise over p's shape.

    target may be a scalar {0,1} or an array matching p.  Probabilities are
    clamped away from 0/1 so the loss and its gradient stay finite.
    """
    p = T.as_tensor(p)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape).copy()
    if ((t != 0.0) & (t != 1.0)).any():
        raise ValueError("focal_loss targets must be 0 or 1")
    pc = T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus = T.add(T.neg(pc), 1.0)
    pos = T.mul(T.mul(T.power(one_minus, cfg.gamma), T.log(pc)), -cfg.alpha_f)
    negv = T.mul(T.mul(T.power(pc, cfg.gamma), T.log(one_minus)), -(1.0 - cfg.alpha_f))
    tmask = Tensor(t)
    return T.add(T.mul(tmask, pos), T.mul(Tensor(1.0 - t), negv))


def cross_entropy(scores: Tensor, target: int, tau: float = 1.0) -> Tensor:
    """-log softmax(scores / tau)[target] over a 1-D score vector."""
    scores = T.as_tensor(scores)
    if scores.ndim != 1:
        raise ShapeError(f"cross_entropy: need 1-D scores, got {scores.shape}")
    if not 0 <= int(target) < scores.shape[0]:
        raise IndexError(f"cross_entropy: target {target} out of range for {scores.shape[0]} scores")
    if tau <= 0:
        raise ConfigError(f"cross_entropy: temperature must be positive, got {tau}")
    return T.neg(T.take(T.log_softmax(T.mul(scores, 1.0 / tau), axis=0), int(target)))
