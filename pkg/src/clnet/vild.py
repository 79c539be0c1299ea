"""View-Interactive Lesion Detector.

A small shared conv backbone turns each view into feature tokens, a
self-attention encoder refines them, and a decoder with per-view object
queries runs self-attention, cross-attention to the view's tokens and a
cross-view inter-attention step at the end of every block.  Inter-attention
is a pure residual (no layer norm), so zeroing its output projections
reduces the network to a plain per-view detector exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .nn import AttentionParams, FfnParams, LayerNormParams, MlpParams, ParamSet
from .tensor import ShapeError, Tensor


@dataclass
class EncoderLayer:
    attn: AttentionParams
    ln: LayerNormParams
    ffn: FfnParams


@dataclass
class BackboneParams:
    """Conv stem + token positions + encoder, shared by both views."""

    conv: list                    # [(w, b), ...] stride-2 blocks
    tok_row: Tensor               # [grid, D/2] learned 2-D positions
    tok_col: Tensor
    encoder: list                 # EncoderLayer
    activation: str = "gelu"


@dataclass
class DecoderLayer:
    self_attn: AttentionParams
    ln_self: LayerNormParams
    cross_attn: AttentionParams
    ln_cross: LayerNormParams
    inter_c: AttentionParams | None   # destination CC, sources MLO
    inter_m: AttentionParams | None   # destination MLO, sources CC
    ffn: FfnParams


@dataclass
class VildParams:
    query_c: Tensor               # [N, D] object query content per view
    query_m: Tensor
    qpos_c: Tensor                # [N, D] learnable positional encodings
    qpos_m: Tensor
    decoder: list                 # DecoderLayer
    box_head: MlpParams
    score_head: MlpParams


@dataclass
class DetectionSet:
    """Per-view detections: boxes (cx, cy, w, h in (0,1)), scores, embeddings."""

    boxes: Tensor                 # [N, 4]
    scores: Tensor                # [N]
    embeddings: Tensor            # [N, D]
    view_tag: str

    def boxes_np(self) -> np.ndarray:
        return self.boxes.data

    def scores_np(self) -> np.ndarray:
        return self.scores.data


def init_backbone(params: ParamSet, cfg: ModelConfig, rng: np.random.Generator) -> BackboneParams:
    d = cfg.dim
    if d % 2 != 0:
        raise nn.ConfigError(f"dim must be even for the 2-D positional split, got {d}")
    conv = []
    c_in = 1
    for i, c_out in enumerate(cfg.channels):
        fan_in, fan_out = c_in * 9, c_out * 9
        conv.append((
            params.new(f"backbone.conv{i}.w",
                       nn.scaled_uniform(rng, (c_out, c_in, 3, 3), fan_in, fan_out)),
            params.new(f"backbone.conv{i}.b", np.zeros(c_out)),
        ))
        c_in = c_out
    g = cfg.grid
    tok_row = params.new("backbone.pos_row", rng.normal(0, 0.2, size=(g, d // 2)))
    tok_col = params.new("backbone.pos_col", rng.normal(0, 0.2, size=(g, d // 2)))
    encoder = []
    for i in range(cfg.encoder_layers):
        encoder.append(EncoderLayer(
            nn.init_attention(params, f"encoder.{i}.attn", d, cfg.heads, rng),
            nn.init_layer_norm(params, f"encoder.{i}.ln", d),
            nn.init_ffn(params, f"encoder.{i}.ffn", d, cfg.hidden, rng, cfg.activation),
        ))
    return BackboneParams(conv, tok_row, tok_col, encoder, cfg.activation)


def init_vild(params: ParamSet, cfg: ModelConfig, rng: np.random.Generator) -> VildParams:
    d = cfg.dim
    n = cfg.n_queries
    query_c = params.new("queries.content_c", rng.normal(0, 0.2, size=(n, d)))
    query_m = params.new("queries.content_m", rng.normal(0, 0.2, size=(n, d)))
    qpos_c = params.new("queries.pos_c", rng.normal(0, 0.2, size=(n, d)))
    qpos_m = params.new("queries.pos_m", rng.normal(0, 0.2, size=(n, d)))

    decoder = []
    for i in range(cfg.decoder_layers):
        inter_c = inter_m = None
        if cfg.inter_attention:
            inter_c = nn.init_attention(params, f"decoder.{i}.inter_c", d, cfg.heads, rng,
                                        zero_out=True)
            if cfg.tie_inter_attention:
                inter_m = inter_c
            else:
                inter_m = nn.init_attention(params, f"decoder.{i}.inter_m", d, cfg.heads, rng,
                                            zero_out=True)
        decoder.append(DecoderLayer(
            nn.init_attention(params, f"decoder.{i}.self", d, cfg.heads, rng),
            nn.init_layer_norm(params, f"decoder.{i}.ln_self", d),
            nn.init_attention(params, f"decoder.{i}.cross", d, cfg.heads, rng),
            nn.init_layer_norm(params, f"decoder.{i}.ln_cross", d),
            inter_c,
            inter_m,
            nn.init_ffn(params, f"decoder.{i}.ffn", d, cfg.hidden, rng, cfg.activation),
        ))

    box_head = nn.init_mlp(params, "heads.box", [d, d, d, 4], rng, cfg.activation)
    score_head = nn.init_mlp(params, "heads.score", [d, 1], rng, cfg.activation)
    return VildParams(query_c, query_m, qpos_c, qpos_m, decoder, box_head, score_head)


def token_positions(p: BackboneParams, grid: int) -> Tensor:
    """[grid*grid, D] learned 2-D positional encoding (row half + col half)."""
    half = p.tok_row.shape[1]
    row = T.permute(T.reshape(T.expand0(p.tok_row, grid), (grid, grid, half)), (1, 0, 2))
    col = T.reshape(T.expand0(p.tok_col, grid), (grid, grid, half))
    return T.reshape(T.concat([row, col], axis=2), (grid * grid, 2 * half))


def _backbone_tokens(p: BackboneParams, img: Tensor) -> Tensor:
    x = T.reshape(img, (1,) + tuple(img.shape))
    for w, b in p.conv:
        x = nn._activate(T.conv2d(x, w, b, stride=2, padding=1), p.activation)
    d, gh, gw = x.shape
    return T.transpose(T.reshape(x, (d, gh * gw)))        # [T, D]


def encode_views(p: BackboneParams, cfg: ModelConfig, img_c, img_m):
    """Shared-weight backbone + encoder for both views -> token tensors [T, D]."""
    expected = (cfg.image_size, cfg.image_size)
    out = []
    for img in (img_c, img_m):
        img = T.as_tensor(img)
        if tuple(img.shape) != expected:
            raise ShapeError(f"encode_views: image shape {img.shape} != {expected}")
        tokens = _backbone_tokens(p, img)
        pos = token_positions(p, cfg.grid)
        for layer in p.encoder:
            qk = T.add(tokens, pos)
            attn = nn.multi_head_attention(layer.attn, qk, qk, tokens)
            tokens = nn.layer_norm(layer.ln, T.add(tokens, attn))
            tokens = nn.ffn_block(layer.ffn, tokens)
        out.append(tokens)
    return out[0], out[1]


def vild_decode(p: VildParams, bb: BackboneParams, cfg: ModelConfig,
                tokens_c, tokens_m, want_attn: bool = False,
                want_aux: bool = False):
    """Decoder with per-block cross-view inter-attention.

    Returns the last-layer embeddings per view plus (optionally) the
    head-averaged inter-attention weight matrices per layer and direction.
    With want_aux, every non-final layer's output embeddings are collected
    for deep supervision.
    """
    tok_pos = token_positions(bb, cfg.grid)
    e_c, e_m = p.query_c, p.query_m
    dumps = {}
    aux = []
    for li, layer in enumerate(p.decoder):
        new = []
        for e, qpos, tokens in ((e_c, p.qpos_c, tokens_c), (e_m, p.qpos_m, tokens_m)):
            q = T.add(e, qpos)
            e = nn.layer_norm(layer.ln_self, T.add(e, nn.multi_head_attention(
                layer.self_attn, q, q, e)))
            q = T.add(e, qpos)
            kk = T.add(tokens, tok_pos)
            e = nn.layer_norm(layer.ln_cross, T.add(e, nn.multi_head_attention(
                layer.cross_attn, q, kk, tokens)))
            new.append(e)
        e_c, e_m = new
        if cfg.inter_attention:
            # both directions read the same pre-interaction embeddings
            qc = T.add(e_c, p.qpos_c)
            qm = T.add(e_m, p.qpos_m)
            ac, w_cm = nn.multi_head_attention(layer.inter_c, qc, qm, e_m, return_weights=True)
            am, w_mc = nn.multi_head_attention(layer.inter_m, qm, qc, e_c, return_weights=True)
            e_c = T.add(e_c, ac)
            e_m = T.add(e_m, am)
            if want_attn:
                dumps[f"layer{li}_cc_from_mlo"] = w_cm
                dumps[f"layer{li}_mlo_from_cc"] = w_mc
        e_c = nn.ffn_block(layer.ffn, e_c)
        e_m = nn.ffn_block(layer.ffn, e_m)
        if want_aux and li < len(p.decoder) - 1:
            aux.append((e_c, e_m))
    return e_c, e_m, dumps, aux


def detection_heads(p: VildParams, e: Tensor, view_tag: str) -> DetectionSet:
    """Box and score heads on top of the decoder embeddings."""
    boxes = T.sigmoid(nn.mlp_forward(p.box_head, e))
    scores = T.sigmoid(T.reshape(nn.mlp_forward(p.score_head, e), (e.shape[0],)))
    return DetectionSet(boxes, scores, e, view_tag)
