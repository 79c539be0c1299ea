"""Model assembly: one object owning the parameter set and the forward pass
for every variant (full pipeline, detector-only, linker-only, and the two
baseline heads: pair verification and paired lesion queries)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linker as lk
from . import nn
from . import tensor as T
from . import vild
from .config import ModelConfig
from .nn import MlpParams, ParamSet
from .tensor import Tensor


@dataclass
class PvParams:
    """Pair-verification head: a shared MLP re-embedding plus its own dustbin."""

    mlp: MlpParams
    dustbin: Tensor


@dataclass
class PlqParams:
    """Paired-lesion-query decoder and its per-view prediction heads."""

    queries: Tensor
    layers: list                  # lk.LinkerLayer blocks over image tokens
    box_c: MlpParams
    box_m: MlpParams
    score_c: MlpParams
    score_m: MlpParams


@dataclass
class Model:
    cfg: ModelConfig
    params: ParamSet
    backbone: vild.BackboneParams
    vild: vild.VildParams | None = None
    linker: lk.LinkerParams | None = None
    pv: PvParams | None = None
    plq: PlqParams | None = None


@dataclass
class ForwardOut:
    """Everything one sample's forward pass produces."""

    det_c: vild.DetectionSet
    det_m: vild.DetectionSet
    e_tilde_c: Tensor | None = None   # [(N+1), D] dustbin-extended embeddings
    e_tilde_m: Tensor | None = None
    v_c: Tensor | None = None         # [M, D] link embeddings
    v_m: Tensor | None = None
    s: Tensor | None = None           # [M] pair confidences
    pv_scores: Tensor | None = None   # [(N+1), (N+1)] verification logits
    aux: list = field(default_factory=list)   # per-layer DetectionSet pairs
    attn: dict = field(default_factory=dict)


def init_parameters(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic full parameter set for the configured variant."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    backbone = vild.init_backbone(params, cfg, rng)
    model = Model(cfg, params, backbone)
    if cfg.variant == "paired_lesion_query":
        d = cfg.dim
        # same zero-init rationale as the linker: pure residuals, no norms
        # between attention steps
        layers = [
            lk.LinkerLayer(
                nn.init_attention(params, f"plq.{i}.self", d, cfg.heads, rng, zero_out=True),
                nn.init_attention(params, f"plq.{i}.cross_c", d, cfg.heads, rng, zero_out=True),
                nn.init_attention(params, f"plq.{i}.cross_m", d, cfg.heads, rng, zero_out=True),
                nn.init_ffn(params, f"plq.{i}.ffn", d, cfg.hidden, rng, cfg.activation),
            )
            for i in range(cfg.linker_layers)
        ]
        model.plq = PlqParams(
            queries=params.new("plq.queries", rng.normal(0, 0.2, size=(cfg.n_queries, d))),
            layers=layers,
            box_c=nn.init_mlp(params, "plq.box_c", [d, d, d, 4], rng, cfg.activation),
            box_m=nn.init_mlp(params, "plq.box_m", [d, d, d, 4], rng, cfg.activation),
            score_c=nn.init_mlp(params, "plq.score_c", [d, 1], rng, cfg.activation),
            score_m=nn.init_mlp(params, "plq.score_m", [d, 1], rng, cfg.activation),
        )
        return model

    model.vild = vild.init_vild(params, cfg, rng)
    if cfg.variant in ("clnet", "linker_only"):
        model.linker = lk.init_linker(params, cfg, rng)
    if cfg.variant == "pair_verification":
        d = cfg.dim
        model.pv = PvParams(
            mlp=nn.init_mlp(params, "pv.mlp", [d, d, d], rng, cfg.activation),
            dustbin=params.new("pv.dustbin", rng.normal(0, 0.2, size=(1, d))),
        )
    return model


def _plq_forward(model: Model, tokens_c, tokens_m) -> ForwardOut:
    cfg = model.cfg
    p = model.plq
    tok_pos = vild.token_positions(model.backbone, cfg.grid)
    q = p.queries
    for layer in p.layers:
        q = T.add(q, nn.multi_head_attention(layer.self_attn, q, q, q))
        q = T.add(q, nn.multi_head_attention(layer.cross_c, q, T.add(tokens_c, tok_pos), tokens_c))
        q = T.add(q, nn.multi_head_attention(layer.cross_m, q, T.add(tokens_m, tok_pos), tokens_m))
        q = nn.ffn_block(layer.ffn, q)
    n = q.shape[0]
    det_c = vild.DetectionSet(
        T.sigmoid(nn.mlp_forward(p.box_c, q)),
        T.sigmoid(T.reshape(nn.mlp_forward(p.score_c, q), (n,))),
        q, "cc")
    det_m = vild.DetectionSet(
        T.sigmoid(nn.mlp_forward(p.box_m, q)),
        T.sigmoid(T.reshape(nn.mlp_forward(p.score_m, q), (n,))),
        q, "mlo")
    return ForwardOut(det_c, det_m)


def forward(model: Model, img_c, img_m, want_attn: bool = False) -> ForwardOut:
    """Full forward pass for one two-view sample."""
    cfg = model.cfg
    tokens_c, tokens_m = vild.encode_views(model.backbone, cfg, img_c, img_m)
    if cfg.variant == "paired_lesion_query":
        return _plq_forward(model, tokens_c, tokens_m)

    e_c, e_m, attn, aux = vild.vild_decode(model.vild, model.backbone, cfg,
                                           tokens_c, tokens_m,
                                           want_attn=want_attn,
                                           want_aux=cfg.aux_loss)
    out = ForwardOut(
        det_c=vild.detection_heads(model.vild, e_c, "cc"),
        det_m=vild.detection_heads(model.vild, e_m, "mlo"),
        aux=[(vild.detection_heads(model.vild, ec, "cc"),
              vild.detection_heads(model.vild, em, "mlo")) for ec, em in aux],
        attn=attn,
    )
    if model.linker is not None:
        out.e_tilde_c = lk.append_dustbin(e_c, model.linker.dustbin)
        out.e_tilde_m = lk.append_dustbin(e_m, model.linker.dustbin)
        pos_c = T.concat([model.vild.qpos_c, model.linker.dustbin_pos], axis=0)
        pos_m = T.concat([model.vild.qpos_m, model.linker.dustbin_pos], axis=0)
        q_hat, link_attn = lk.link_decode(model.linker, cfg, out.e_tilde_c, out.e_tilde_m,
                                          pos_c, pos_m, want_attn=want_attn)
        out.v_c, out.v_m, out.s = lk.link_heads(model.linker, q_hat)
        out.attn.update(link_attn)
    if model.pv is not None:
        ec_hat = lk.append_dustbin(nn.mlp_forward(model.pv.mlp, e_c), model.pv.dustbin)
        em_hat = lk.append_dustbin(nn.mlp_forward(model.pv.mlp, e_m), model.pv.dustbin)
        out.pv_scores = T.matmul(ec_hat, T.transpose(em_hat))
    return out
