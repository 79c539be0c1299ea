"""Bipartite label assignment.

Cost matrices are plain square float64 numpy arrays (rows = padded ground
truth, cols = predictions).  The Hungarian solver returns the
lexicographically smallest optimal permutation: after the O(n^3) potentials
pass, ties are resolved on the admissible graph (edges with zero reduced
cost under the final duals), where optimality is a purely combinatorial
property.  Matching is gradient-free throughout; embeddings enter these
costs as detached arrays.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .nn import ConfigError

# DETR-family detection matching weights; the same weights reappear in the
# detection loss.
W_CLS = 2.0
W_L1 = 5.0
W_GIOU = 2.0

EMD_CLAMP = 1e-9   # floor before fractional powers in the Mul cost
_TIE_TOL = 1e-12   # reduced costs at or below this (scaled) count as ties


@dataclass
class AssignmentResult:
    """perm[i] = prediction index matched to ground-truth row i."""

    perm: list
    total_cost: float

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValueError(f"perm {self.perm} is not a bijection")


@dataclass
class GroundTruthTriplet:
    """Supervision target for one link query: embedding slots plus indicator.

    e_c / e_m index into the dustbin-extended detection embeddings (slot
    n_queries is the dustbin); a=0 marks a padding row.
    """

    e_c: int
    e_m: int
    a: int


def _validate_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def _potentials_solve(a: np.ndarray):
    """Classic O(n^3) shortest-augmenting-path pass.

    Returns (perm, u, v): an optimal row->col permutation and feasible dual
    potentials with u[i] + v[j] <= a[i, j] and equality on matched edges.
    """
    n = a.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)       # p[j] = row matched to column j (1-based, 0 = free)
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        way = np.zeros(n + 1, dtype=np.intp)
        used = np.zeros(n + 1, dtype=bool)
        used[0] = True
        while True:
            i0 = p[j0]
            cur = c[i0] - u[i0] - v
            better = (cur < minv) & ~used
            minv[better] = cur[better]
            way[better] = j0
            free = np.where(~used)[0]
            j1 = free[np.argmin(minv[free])]
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            used[j0] = True
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.intp)
    perm[p[1:] - 1] = np.arange(n)
    return perm, u[1:], v[1:]


def _lex_smallest_on_admissible(adm: np.ndarray, base_perm: np.ndarray):
    """Lexicographically smallest perfect matching within the admissible graph.

    base_perm must itself be admissible; each improvement attempt costs one
    augmenting-path search, so unique-optimum instances pass straight through.
    """
    n = len(base_perm)
    rowcol = list(base_perm)
    owner = [-1] * n
    for i, j in enumerate(rowcol):
        owner[j] = i
    adj = [np.flatnonzero(adm[i]).tolist() for i in range(n)]
    locked = [False] * n

    def augment(r, visited):
        for col in adj[r]:
            if locked[col] or visited[col]:
                continue
            visited[col] = True
            if owner[col] == -1 or augment(owner[col], visited):
                owner[col] = r
                rowcol[r] = col
                return True
        return False

    for i in range(n):
        cur = rowcol[i]
        for j in adj[i]:
            if j >= cur:
                break
            if locked[j]:
                continue
            r = owner[j]           # some later row holds j; try to re-seat it
            owner[j] = i
            owner[cur] = -1
            rowcol[i] = j
            visited = [False] * n
            visited[j] = True
            if augment(r, visited):
                cur = j
                break
            owner[j] = r           # revert
            owner[cur] = i
            rowcol[i] = cur
        locked[cur] = True
    return rowcol


def hungarian(cost) -> AssignmentResult:
    """Minimum-cost one-to-one assignment on a square, finite cost matrix.

    Among equal-cost optima the lexicographically smallest permutation (by
    perm[0], then perm[1], ...) is returned; cost ties below a 1e-12 scaled
    tolerance are treated as exact.
    """
    cost = _validate_cost(cost)
    n = cost.shape[0]
    if n == 0:
        return AssignmentResult([], 0.0)
    base, u, v = _potentials_solve(cost)
    tol = _TIE_TOL * max(1.0, float(np.abs(cost).max()))
    reduced = cost - u[:, None] - v[None, :]
    perm = _lex_smallest_on_admissible(reduced <= tol, base)
    total = math.fsum(cost[i, perm[i]] for i in range(n))
    return AssignmentResult(list(perm), total)


def brute_force_assign(cost) -> AssignmentResult:
    """Exhaustive minimum over all permutations (test oracle, n <= 9)."""
    cost = _validate_cost(cost)
    n = cost.shape[0]
    if n > 9:
        raise ValueError(f"brute force limited to n <= 9, got {n}")
    if n == 0:
        return AssignmentResult([], 0.0)
    best_perm = None
    best_total = math.inf
    for perm in itertools.permutations(range(n)):
        total = math.fsum(cost[i, perm[i]] for i in range(n))
        if total < best_total:
            best_total = total
            best_perm = perm
    return AssignmentResult(list(best_perm), best_total)


# ---------------------------------------------------------------------------
# box geometry (plain-array route; the differentiable route lives in losses)


def boxes_cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx, cy, w, h = boxes.T
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def giou_matrix(a_cxcywh: np.ndarray, b_cxcywh: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU, [len(a), len(b)], values in (-1, 1]."""
    a = boxes_cxcywh_to_xyxy(a_cxcywh)
    b = boxes_cxcywh_to_xyxy(b_cxcywh)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / np.maximum(union, 1e-12)
    lt_c = np.minimum(a[:, None, :2], b[None, :, :2])
    rb_c = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_c = np.clip(rb_c - lt_c, 0.0, None)
    hull = wh_c[..., 0] * wh_c[..., 1]
    return iou - (hull - union) / np.maximum(hull, 1e-12)


def detection_match_cost(scores: np.ndarray, boxes: np.ndarray,
                         gt_boxes: np.ndarray) -> np.ndarray:
    """DETR-style matching cost, padded square [n_slots, n_slots].

    Rows are ground-truth boxes padded with zero-cost rows up to the number
    of prediction slots; columns are predictions.  Entry (i, j) for a real
    ground truth is w_cls*(-score_j) + w_l1*L1 + w_giou*(1 - GIoU).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = scores.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    k = gt_boxes.shape[0]
    if k > n:
        raise ValueError(f"{k} ground-truth boxes exceed {n} prediction slots")
    cost = np.zeros((n, n))
    if k:
        l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).sum(axis=2)
        giou = giou_matrix(gt_boxes, boxes)
        cost[:k] = W_CLS * (-scores)[None, :] + W_L1 * l1 + W_GIOU * (1.0 - giou)
    return cost


def gt_to_triplets(assign_c: AssignmentResult, assign_m: AssignmentResult,
                   pairs, n_queries: int, n_links: int) -> list:
    """Convert ground-truth box pairs into embedding-slot triplets.

    pairs holds (cc GT index | None, mlo GT index | None); a missing side
    maps to the dustbin slot (index n_queries).  The result is padded with
    a=0 rows to n_links.
    """
    dustbin = n_queries
    if len(pairs) > n_links:
        raise ValueError(f"{len(pairs)} ground-truth pairs exceed {n_links} link queries")
    triplets = []
    for gc, gm in pairs:
        if gc is None and gm is None:
            raise ValueError("pair references no real box in either view")
        if gc is not None and not 0 <= gc < len(assign_c.perm):
            raise ValueError(f"cc ground-truth index {gc} has no detection assignment")
        if gm is not None and not 0 <= gm < len(assign_m.perm):
            raise ValueError(f"mlo ground-truth index {gm} has no detection assignment")
        slot_c = dustbin if gc is None else assign_c.perm[gc]
        slot_m = dustbin if gm is None else assign_m.perm[gm]
        triplets.append(GroundTruthTriplet(slot_c, slot_m, 1))
    while len(triplets) < n_links:
        triplets.append(GroundTruthTriplet(dustbin, dustbin, 0))
    return triplets


# ---------------------------------------------------------------------------
# link matching cost


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity [len(a), len(b)] with guarded norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1) + 1e-12
    nb = np.linalg.norm(b, axis=1) + 1e-12
    return (a @ b.T) / na[:, None] / nb[None, :]


def link_match_cost(triplets, v_c: np.ndarray, v_m: np.ndarray, s: np.ndarray,
                    e_tilde_c: np.ndarray, e_tilde_m: np.ndarray,
                    alpha: float = 0.5, beta: float = 0.5,
                    cost_form: str = "mul") -> np.ndarray:
    """Matching cost between ground-truth triplets and predicted link triplets.

    emd(i, j) = beta*sim(slot_c_i, v_c_j) + (1-beta)*sim(slot_m_i, v_m_j) + 1
    (the +1 keeps it in [0, 2]); score(i, j) = s_j.  "mul" combines them as
    -(emd^alpha * score^(1-alpha)), "add" as -(alpha*emd + (1-alpha)*score);
    padding rows (a=0) cost 0 against every column.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0,1], got {alpha}")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0,1], got {beta}")
    if cost_form not in ("mul", "add"):
        raise ConfigError(f"cost_form must be 'mul' or 'add', got {cost_form!r}")
    m = len(triplets)
    v_c = np.asarray(v_c, dtype=np.float64)
    v_m = np.asarray(v_m, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if not (v_c.shape[0] == v_m.shape[0] == s.shape[0] == m):
        raise ValueError(f"expected {m} predictions, got {v_c.shape[0]}/{v_m.shape[0]}/{s.shape[0]}")

    slots_c = np.array([t.e_c for t in triplets], dtype=np.intp)
    slots_m = np.array([t.e_m for t in triplets], dtype=np.intp)
    active = np.array([t.a != 0 for t in triplets])
    sim_c = cosine_matrix(np.asarray(e_tilde_c)[slots_c], v_c)
    sim_m = cosine_matrix(np.asarray(e_tilde_m)[slots_m], v_m)
    emd = beta * sim_c + (1.0 - beta) * sim_m + 1.0
    if cost_form == "mul":
        entries = -np.power(np.maximum(emd, EMD_CLAMP), alpha) * np.power(s, 1.0 - alpha)[None, :]
    else:
        entries = -(alpha * emd + (1.0 - alpha) * s[None, :])
    entries[~active] = 0.0
    return entries
