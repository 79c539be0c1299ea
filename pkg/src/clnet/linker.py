"""Lesion Linker: dustbin-extended candidate pools, a link-query decoder, the
triplet heads, and correspondence extraction.

Link queries self-attend, then read the CC and MLO detection embeddings in
turn (pure residual adds, mirroring the detector's inter-attention), and an
FFN block closes each layer.  Three heads decode every query into a triplet:
link embeddings for both views plus a pair confidence.  A single learnable
dustbin row is appended to both views' embeddings so one-view-only lesions
have something to link to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .assignment import cosine_matrix
from .config import ModelConfig
from .nn import AttentionParams, FfnParams, MlpParams, ParamSet
from .tensor import ShapeError, Tensor


@dataclass
class LinkerLayer:
    self_attn: AttentionParams
    cross_c: AttentionParams
    cross_m: AttentionParams
    ffn: FfnParams


@dataclass
class LinkerParams:
    dustbin: Tensor               # [1, D] shared across views
    dustbin_pos: Tensor           # [1, D] positional row for the dustbin slot
    queries: Tensor               # [M, D] link queries
    layers: list
    head_c: MlpParams
    head_m: MlpParams
    head_s: MlpParams


@dataclass
class ExtractedPair:
    """One link query's correspondence: slot indices with dustbin = n_queries."""

    query_id: int
    c_index: int
    m_index: int
    score: float


def init_linker(params: ParamSet, cfg: ModelConfig, rng: np.random.Generator) -> LinkerParams:
    d = cfg.dim
    layers = []
    # attention output projections start at zero: the pure-residual layer
    # stack has no norm between attention steps, so full-scale attention
    # outputs (built from unit-normed embeddings) would drown the queries
    # and collapse them onto one direction at init
    for i in range(cfg.linker_layers):
        layers.append(LinkerLayer(
            nn.init_attention(params, f"linker.{i}.self", d, cfg.heads, rng, zero_out=True),
            nn.init_attention(params, f"linker.{i}.cross_c", d, cfg.heads, rng, zero_out=True),
            nn.init_attention(params, f"linker.{i}.cross_m", d, cfg.heads, rng, zero_out=True),
            nn.init_ffn(params, f"linker.{i}.ffn", d, cfg.hidden, rng, cfg.activation),
        ))
    return LinkerParams(
        dustbin=params.new("linker.dustbin", rng.normal(0, 0.2, size=(1, d))),
        dustbin_pos=params.new("linker.dustbin_pos", rng.normal(0, 0.2, size=(1, d))),
        queries=params.new("linker.queries", rng.normal(0, 0.2, size=(cfg.n_links, d))),
        layers=layers,
        head_c=nn.init_mlp(params, "linker.head_c", [d, d, d], rng, cfg.activation,
                           zero_last=True, last_bias_scale=0.1),
        head_m=nn.init_mlp(params, "linker.head_m", [d, d, d], rng, cfg.activation,
                           zero_last=True, last_bias_scale=0.1),
        head_s=nn.init_mlp(params, "linker.head_s", [d, 1], rng, cfg.activation,
                           zero_last=True),
    )


def append_dustbin(e: Tensor, dustbin: Tensor) -> Tensor:
    """Concat the dustbin row under the N detection embeddings -> [(N+1), D]."""
    e, dustbin = T.as_tensor(e), T.as_tensor(dustbin)
    if e.ndim != 2 or dustbin.shape != (1, e.shape[1]):
        raise ShapeError(f"append_dustbin: shapes {e.shape} and {dustbin.shape}")
    return T.concat([e, dustbin], axis=0)


def link_decode(p: LinkerParams, cfg: ModelConfig, e_tilde_c: Tensor, e_tilde_m: Tensor,
                pos_c: Tensor, pos_m: Tensor, want_attn: bool = False):
    """Refine link queries against both views' dustbin-extended embeddings.

    pos_c/pos_m are the view positional encodings already extended with the
    dustbin row.  Returns the refined queries and, on request, head-averaged
    cross-attention weights per layer and view.
    """
    q = p.queries
    views = [("cc", e_tilde_c, pos_c, "cross_c"), ("mlo", e_tilde_m, pos_m, "cross_m")]
    if not cfg.linker_cc_first:
        views.reverse()
    dumps = {}
    for li, layer in enumerate(p.layers):
        q = T.add(q, nn.multi_head_attention(layer.self_attn, q, q, q))
        for tag, e, pos, attr in views:
            out, w = nn.multi_head_attention(
                getattr(layer, attr), q, T.add(e, pos), e, return_weights=True)
            q = T.add(q, out)
            if want_attn:
                dumps[f"layer{li}_link_from_{tag}"] = w
        q = nn.ffn_block(layer.ffn, q)
    return q, dumps


def link_heads(p: LinkerParams, q_hat: Tensor):
    """Triplet heads: (V_c [M,D], V_m [M,D], S [M] pair confidences)."""
    v_c = nn.mlp_forward(p.head_c, q_hat)
    v_m = nn.mlp_forward(p.head_m, q_hat)
    s = T.sigmoid(T.reshape(nn.mlp_forward(p.head_s, q_hat), (q_hat.shape[0],)))
    return v_c, v_m, s


def cosine_sim(x: Tensor, y: Tensor) -> Tensor:
    """Cosine similarity of two vectors, denominators guarded by 1e-12."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"cosine_sim: shapes {x.shape} and {y.shape}")
    dot = T.sum_all(T.mul(x, y))
    # epsilon inside the sqrt so the gradient stays finite at zero vectors
    nx = T.add(T.sqrt(T.add(T.sum_all(T.mul(x, x)), 1e-24)), 1e-12)
    ny = T.add(T.sqrt(T.add(T.sum_all(T.mul(y, y)), 1e-24)), 1e-12)
    return T.div(dot, T.mul(nx, ny))


def extract_pairs(v_c, v_m, s, e_tilde_c, e_tilde_m, score_floor: float = 0.5) -> list:
    """Argmax-similarity slot per view for each confident link query.

    Ties break toward the lowest slot index; queries below the confidence
    floor or landing in the dustbin on both sides are dropped.
    """
    v_c = np.asarray(v_c.data if isinstance(v_c, Tensor) else v_c, dtype=np.float64)
    v_m = np.asarray(v_m.data if isinstance(v_m, Tensor) else v_m, dtype=np.float64)
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64).reshape(-1)
    e_c = np.asarray(e_tilde_c.data if isinstance(e_tilde_c, Tensor) else e_tilde_c)
    e_m = np.asarray(e_tilde_m.data if isinstance(e_tilde_m, Tensor) else e_tilde_m)
    if v_c.shape[0] != v_m.shape[0] or v_c.shape[0] != s.shape[0]:
        raise ShapeError(f"extract_pairs: {v_c.shape[0]}/{v_m.shape[0]}/{s.shape[0]} rows")
    dustbin = e_c.shape[0] - 1
    sims_c = cosine_matrix(v_c, e_c)     # np.argmax picks the first (lowest) maximizer
    sims_m = cosine_matrix(v_m, e_m)
    out = []
    for i in range(v_c.shape[0]):
        if s[i] < score_floor:
            continue
        ci = int(np.argmax(sims_c[i]))
        mi = int(np.argmax(sims_m[i]))
        if ci == dustbin and mi == dustbin:
            continue
        out.append(ExtractedPair(i, ci, mi, float(s[i])))
    return out
