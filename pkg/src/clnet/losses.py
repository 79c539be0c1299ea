"""Composite training objective.

Detection loss is the DETR recipe (focal classification over all slots plus
L1 and generalized-IoU box terms on matched slots).  The link loss combines
a slot-localization cross-entropy over cosine similarities (detection
embeddings held constant there; gradients shape the link embeddings) with a
focal pair-classification term that also covers padding rows as negatives.
Matching itself is gradient-free.  The two baseline heads, pair
verification and paired lesion queries, get their own objectives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import assignment as asg
from . import nn
from . import tensor as T
from .assignment import AssignmentResult, W_CLS, W_GIOU, W_L1
from .config import ModelConfig
from .model import ForwardOut
from .nn import FocalConfig
from .tensor import Tensor
from .vild import DetectionSet


@dataclass
class Matchings:
    """One sample's gradient-free context: assignment decisions plus the
    detection-embedding snapshot the localization term treats as constant.
    Training recomputes this every step from the current forward; gradient
    checks hold it fixed, because the loss is only piecewise smooth across
    matching flips and the snapshot is a stop-gradient branch."""

    assign_c: AssignmentResult | None = None
    assign_m: AssignmentResult | None = None
    triplets: list | None = None
    link_perm: list | None = None
    slot_embeds_c: np.ndarray | None = None
    slot_embeds_m: np.ndarray | None = None
    plq_assign: AssignmentResult | None = None
    aux_assigns: list = field(default_factory=list)  # per aux layer (cc, mlo)


@dataclass
class LossReport:
    """Scalar loss tensor plus the per-term breakdown for logging."""

    loss: Tensor
    total: float
    l_d: float
    l_link: float
    l_sim: float = 0.0
    l_cls: float = 0.0
    matchings: Matchings | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"total": self.total, "l_d": self.l_d, "l_link": self.l_link,
               "l_sim": self.l_sim, "l_cls": self.l_cls}
        out.update(self.extras)
        return out


def _boxes_to_xyxy_t(boxes: Tensor):
    """Column tensors (x0, y0, x1, y1), each [1, k], from cxcywh rows."""
    bt = T.transpose(boxes)
    cx, cy = T.gather_rows(bt, [0]), T.gather_rows(bt, [1])
    w, h = T.gather_rows(bt, [2]), T.gather_rows(bt, [3])
    return (T.sub(cx, T.mul(w, 0.5)), T.sub(cy, T.mul(h, 0.5)),
            T.add(cx, T.mul(w, 0.5)), T.add(cy, T.mul(h, 0.5)), w, h)


def giou_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Sum of (1 - GIoU) over aligned box rows; differentiable route."""
    px0, py0, px1, py1, pw, ph = _boxes_to_xyxy_t(pred)
    gx0, gy0, gx1, gy1, gw, gh = _boxes_to_xyxy_t(T.as_tensor(gt))
    iw = T.relu(T.sub(T.minimum(px1, gx1), T.maximum(px0, gx0)))
    ih = T.relu(T.sub(T.minimum(py1, gy1), T.maximum(py0, gy0)))
    inter = T.mul(iw, ih)
    area_p = T.mul(pw, ph)
    area_g = T.mul(gw, gh)
    union = T.sub(T.add(area_p, area_g), inter)
    iou = T.div(inter, union)
    hw = T.sub(T.maximum(px1, gx1), T.minimum(px0, gx0))
    hh = T.sub(T.maximum(py1, gy1), T.minimum(py0, gy0))
    hull = T.mul(hw, hh)
    giou = T.sub(iou, T.div(T.sub(hull, union), hull))
    return T.sum_all(T.add(T.neg(giou), 1.0))


def detection_loss(det: DetectionSet, gt_boxes, assignment: AssignmentResult,
                   focal_cfg: FocalConfig) -> Tensor:
    """Focal classification over all slots + L1/GIoU on matched slots."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    k = len(gt_boxes)
    n = det.scores.shape[0]
    targets = np.zeros(n)
    if k:
        targets[[assignment.perm[i] for i in range(k)]] = 1.0
    cls = T.sum_all(nn.focal_loss(det.scores, targets, focal_cfg))
    norm = 1.0 / max(1, k)
    if k == 0:
        return T.mul(cls, W_CLS * norm)
    matched = T.gather_rows(det.boxes, [assignment.perm[i] for i in range(k)])
    l1 = T.sum_all(T.absolute(T.sub(matched, Tensor(gt_boxes))))
    gi = giou_loss(matched, Tensor(gt_boxes))
    total = T.add(T.add(T.mul(cls, W_CLS), T.mul(l1, W_L1)), T.mul(gi, W_GIOU))
    return T.mul(total, norm)


def _normalize_rows(x: Tensor) -> Tensor:
    # epsilon inside the sqrt keeps the backward pass finite at zero rows
    # (the link heads start zero-initialized)
    norms = T.sqrt(T.add(T.sum_axis(T.mul(x, x), 1), 1e-24))
    return T.scale_rows(x, T.power(norms, -1.0))


def link_loss(triplets, v_c: Tensor, v_m: Tensor, s: Tensor,
              slot_embeds_c, slot_embeds_m, perm, cfg: ModelConfig):
    """Slot-localization + pair-classification loss under a fixed matching.

    Returns (loss tensor, sim part, cls part).  slot_embeds_* are the
    dustbin-extended detection embeddings as plain arrays: constants inside
    the localization term, so gradients shape the link embeddings only.
    Padding rows contribute focal negatives only.
    """
    m = len(triplets)
    active = [i for i in range(m) if triplets[i].a != 0]

    # classification over every query, padding rows as negatives
    targets = np.array([float(triplets[i].a != 0) for i in range(m)])
    s_perm = T.reshape(T.gather_rows(T.reshape(s, (m, 1)), list(perm)), (m,))
    cls = T.sum_all(nn.focal_loss(s_perm, targets, cfg.focal))

    sim = Tensor(0.0)
    if active:
        sel = [perm[i] for i in active]
        for v, slots, slot_attr in ((v_c, slot_embeds_c, "e_c"), (v_m, slot_embeds_m, "e_m")):
            if isinstance(slots, Tensor):
                slots = slots.data
            vn = _normalize_rows(T.gather_rows(v, sel))
            en = _normalize_rows(Tensor(np.asarray(slots, dtype=np.float64)))
            logits = T.mul(T.matmul(vn, T.transpose(en)), 1.0 / cfg.tau)
            logp = T.log_softmax(logits, axis=1)
            onehot = np.zeros(logp.shape)
            for row, i in enumerate(active):
                onehot[row, getattr(triplets[i], slot_attr)] = 1.0
            sim = T.add(sim, T.neg(T.sum_all(T.mul(logp, Tensor(onehot)))))
    loss = T.add(T.mul(sim, cfg.lambda_sim), T.mul(cls, cfg.lambda_cls))
    return loss, sim, cls


def pair_verification_loss(pv_scores: Tensor, gt_matrix: np.ndarray,
                           focal_cfg: FocalConfig) -> Tensor:
    """Focal loss between sigmoid(score matrix) and the 0/1 match matrix."""
    if pv_scores.shape != gt_matrix.shape:
        raise T.ShapeError(f"pv scores {pv_scores.shape} vs gt matrix {gt_matrix.shape}")
    return T.sum_all(nn.focal_loss(T.sigmoid(pv_scores), gt_matrix, focal_cfg))


def pv_gt_matrix(assign_c: AssignmentResult, assign_m: AssignmentResult,
                 pairs, n_queries: int) -> np.ndarray:
    """Ground-truth (N+1)x(N+1) match matrix; dustbin row/col for one-view."""
    m = np.zeros((n_queries + 1, n_queries + 1))
    for gc, gm in pairs:
        i = n_queries if gc is None else assign_c.perm[gc]
        j = n_queries if gm is None else assign_m.perm[gm]
        m[i, j] = 1.0
    return m


def plq_match_cost(det_c: DetectionSet, det_m: DetectionSet, pairs,
                   gt_c: np.ndarray, gt_m: np.ndarray) -> np.ndarray:
    """Pair-level matching cost: the larger of the two per-view costs.

    Rows are ground-truth pairs padded to the query count; a pair missing in
    one view contributes only its visible view's cost.
    """
    n = det_c.scores.shape[0]
    if len(pairs) > n:
        raise ValueError(f"{len(pairs)} pairs exceed {n} paired queries")
    cost_c = asg.detection_match_cost(det_c.scores_np(), det_c.boxes_np(), gt_c)
    cost_m = asg.detection_match_cost(det_m.scores_np(), det_m.boxes_np(), gt_m)
    cost = np.zeros((n, n))
    for i, (gc, gm) in enumerate(pairs):
        parts = []
        if gc is not None:
            parts.append(cost_c[gc])
        if gm is not None:
            parts.append(cost_m[gm])
        cost[i] = np.max(parts, axis=0)
    return cost


def compute_matchings(out: ForwardOut, sample, cfg: ModelConfig) -> Matchings:
    """Run every Hungarian assignment for one sample (no gradients)."""
    m = Matchings()
    if cfg.variant == "paired_lesion_query":
        cost = plq_match_cost(out.det_c, out.det_m, sample.pairs, sample.gt_c, sample.gt_m)
        m.plq_assign = asg.hungarian(cost)
        return m
    for det, gt, attr in ((out.det_c, sample.gt_c, "assign_c"),
                          (out.det_m, sample.gt_m, "assign_m")):
        cost = asg.detection_match_cost(det.scores_np(), det.boxes_np(), gt)
        setattr(m, attr, asg.hungarian(cost))
    for det_c, det_m in out.aux:
        pair = []
        for det, gt in ((det_c, sample.gt_c), (det_m, sample.gt_m)):
            cost = asg.detection_match_cost(det.scores_np(), det.boxes_np(), gt)
            pair.append(asg.hungarian(cost))
        m.aux_assigns.append(tuple(pair))
    if cfg.variant in ("clnet", "linker_only"):
        m.triplets = asg.gt_to_triplets(m.assign_c, m.assign_m, sample.pairs,
                                        cfg.n_queries, cfg.n_links)
        m.slot_embeds_c = out.e_tilde_c.data.copy()
        m.slot_embeds_m = out.e_tilde_m.data.copy()
        cost = asg.link_match_cost(
            m.triplets, out.v_c.data, out.v_m.data, out.s.data,
            m.slot_embeds_c, m.slot_embeds_m,
            alpha=cfg.alpha, beta=cfg.beta, cost_form=cfg.cost_form)
        m.link_perm = asg.hungarian(cost).perm
    return m


def plq_loss(out: ForwardOut, sample, cfg: ModelConfig,
             matchings: Matchings | None = None) -> LossReport:
    """Per-view detection losses under one pair-level assignment."""
    pairs = sample.pairs
    if matchings is None:
        matchings = compute_matchings(out, sample, cfg)
    assign = matchings.plq_assign
    norm = 1.0 / max(1, len(pairs))
    loss = Tensor(0.0)
    for det, gt_boxes, side in ((out.det_c, sample.gt_c, 0), (out.det_m, sample.gt_m, 1)):
        n = det.scores.shape[0]
        vis = [(i, pairs[i][side]) for i in range(len(pairs)) if pairs[i][side] is not None]
        targets = np.zeros(n)
        targets[[assign.perm[i] for i, _ in vis]] = 1.0
        view = T.mul(T.sum_all(nn.focal_loss(det.scores, targets, cfg.focal)), W_CLS)
        if vis:
            slots = [assign.perm[i] for i, _ in vis]
            gt = np.asarray(gt_boxes, dtype=np.float64)[[g for _, g in vis]]
            matched = T.gather_rows(det.boxes, slots)
            view = T.add(view, T.mul(T.sum_all(T.absolute(T.sub(matched, Tensor(gt)))), W_L1))
            view = T.add(view, T.mul(giou_loss(matched, Tensor(gt)), W_GIOU))
        loss = T.add(loss, T.mul(view, norm))
    total = loss.item()
    return LossReport(loss, total, total, 0.0, matchings=matchings)


def total_loss(out: ForwardOut, sample, cfg: ModelConfig,
               matchings: Matchings | None = None) -> LossReport:
    """Eq.-16 objective: detection loss plus the variant's pairing loss.

    Pass a previously computed Matchings to hold the assignments fixed
    (training recomputes them every step; gradient checks must not).
    """
    if matchings is None:
        matchings = compute_matchings(out, sample, cfg)
    if cfg.variant == "paired_lesion_query":
        return plq_loss(out, sample, cfg, matchings)

    l_d = Tensor(0.0)
    for det, gt, assign in ((out.det_c, sample.gt_c, matchings.assign_c),
                            (out.det_m, sample.gt_m, matchings.assign_m)):
        l_d = T.add(l_d, detection_loss(det, gt, assign, cfg.focal))
    for (det_c, det_m), (a_c, a_m) in zip(out.aux, matchings.aux_assigns):
        l_d = T.add(l_d, detection_loss(det_c, sample.gt_c, a_c, cfg.focal))
        l_d = T.add(l_d, detection_loss(det_m, sample.gt_m, a_m, cfg.focal))

    l_link = Tensor(0.0)
    l_sim_val = l_cls_val = 0.0
    if cfg.variant in ("clnet", "linker_only"):
        l_link, l_sim, l_cls = link_loss(
            matchings.triplets, out.v_c, out.v_m, out.s,
            matchings.slot_embeds_c, matchings.slot_embeds_m,
            matchings.link_perm, cfg)
        l_sim_val, l_cls_val = l_sim.item(), l_cls.item()
    elif cfg.variant == "pair_verification":
        gt_matrix = pv_gt_matrix(matchings.assign_c, matchings.assign_m,
                                 sample.pairs, cfg.n_queries)
        l_link = pair_verification_loss(out.pv_scores, gt_matrix, cfg.pv_focal)
        l_cls_val = l_link.item()

    loss = T.add(l_d, l_link)
    return LossReport(loss, loss.item(), l_d.item(), l_link.item(),
                      l_sim_val, l_cls_val, matchings)
