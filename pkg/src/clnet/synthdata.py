"""Synthetic two-view projection data.

Each lesion is a point (x, y) in a unit-square "volume" with a shared radius
and intensity.  The CC-like view keeps x as its horizontal coordinate, the
MLO-like view keeps the 45-degree coordinate (x + y) / 2; vertical positions
are per-view nuisance draws, so boxes are correlated across views but never
pixel-aligned.  Distractor blobs are rendered per view from the same
marginal distributions as lesion projections and left unlabeled: within one
view they are indistinguishable from lesions, only cross-view consistency
(same radius/intensity, compatible horizontal position) separates them.
Rendering snaps blob centers to integer pixels so samples are bit-identical
for a fixed seed.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .config import GenConfig
from .metrics import box_iou

FORMAT_TAG = "clnet-synth-1"
ANNOT_TAG = "clnet-annot-1"


class DatasetError(ValueError):
    """Malformed dataset or annotation file."""


@dataclass
class PairedSample:
    """Two view images with per-view boxes and cross-view pair labels.

    pairs holds (index into gt_c | None, index into gt_m | None); a None side
    marks a lesion visible in one view only.  Every ground-truth box appears
    in exactly one pair entry.
    """

    img_c: np.ndarray            # [H, W] float32 in [0, 1]
    img_m: np.ndarray
    gt_c: np.ndarray             # [K_c, 4] normalized cxcywh
    gt_m: np.ndarray
    pairs: list
    seed: int

    def validate(self) -> "PairedSample":
        used_c, used_m = set(), set()
        for gc, gm in self.pairs:
            if gc is None and gm is None:
                raise DatasetError("pair references no real box")
            if gc is not None:
                if not 0 <= gc < len(self.gt_c) or gc in used_c:
                    raise DatasetError(f"bad cc index {gc}")
                used_c.add(gc)
            if gm is not None:
                if not 0 <= gm < len(self.gt_m) or gm in used_m:
                    raise DatasetError(f"bad mlo index {gm}")
                used_m.add(gm)
        if len(used_c) != len(self.gt_c) or len(used_m) != len(self.gt_m):
            raise DatasetError("every ground-truth box must appear in exactly one pair")
        return self

    def equals(self, other: "PairedSample") -> bool:
        return (
            np.array_equal(self.img_c, other.img_c)
            and np.array_equal(self.img_m, other.img_m)
            and np.array_equal(self.gt_c, other.gt_c)
            and np.array_equal(self.gt_m, other.gt_m)
            and self.pairs == other.pairs
            and self.seed == other.seed
        )


def _render_blob(img: np.ndarray, cx_px: int, cy_px: int, r: int, amp: float):
    """Additive dome profile amp * (1 - d^2/r^2) on the integer grid."""
    size = img.shape[0]
    x0, x1 = max(0, cx_px - r), min(size - 1, cx_px + r)
    y0, y1 = max(0, cy_px - r), min(size - 1, cy_px + r)
    for py in range(y0, y1 + 1):
        for px in range(x0, x1 + 1):
            d2 = (px - cx_px) ** 2 + (py - cy_px) ** 2
            if d2 <= r * r:
                img[py, px] += amp * (1.0 - d2 / (r * r))


def _blob_box(cx_px: int, cy_px: int, r: int, size: int) -> np.ndarray:
    return np.array([cx_px / size, cy_px / size, 2 * r / size, 2 * r / size])


def _place(rng, u: float, r: int, size: int):
    """Snap a horizontal coordinate to pixels; vertical is a nuisance draw."""
    margin = r + 1
    cx = margin + int(round(u * (size - 1 - 2 * margin)))
    cy = margin + int(round(rng.uniform() * (size - 1 - 2 * margin)))
    return cx, cy


def generate_case(seed, cfg: GenConfig) -> PairedSample:
    """One paired sample, deterministic per seed."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    img_c = np.zeros((size, size))
    img_m = np.zeros((size, size))

    k = int(rng.integers(cfg.min_lesions, cfg.max_lesions + 1))
    gt_c, gt_m, pairs = [], [], []
    boxes_c, boxes_m = [], []

    def clear_of(box, existing):
        return all(box_iou(box, b) <= cfg.max_gt_iou for b in existing)

    for _ in range(k):
        for _attempt in range(60):
            x, y = rng.uniform(), rng.uniform()
            r = int(rng.integers(cfg.radius_min, cfg.radius_max + 1))
            amp = rng.uniform(cfg.intensity_min, cfg.intensity_max)
            vis_c, vis_m = True, True
            if rng.uniform() < cfg.p_occ:
                if rng.uniform() < 0.5:
                    vis_c = False
                else:
                    vis_m = False
            ccx, ccy = _place(rng, x, r, size)
            mcx, mcy = _place(rng, (x + y) / 2.0, r, size)
            box_c = _blob_box(ccx, ccy, r, size)
            box_m = _blob_box(mcx, mcy, r, size)
            if vis_c and not clear_of(box_c, boxes_c):
                continue
            if vis_m and not clear_of(box_m, boxes_m):
                continue
            ic = im = None
            if vis_c:
                _render_blob(img_c, ccx, ccy, r, amp)
                ic = len(gt_c)
                gt_c.append(box_c)
                boxes_c.append(box_c)
            if vis_m:
                _render_blob(img_m, mcx, mcy, r, amp)
                im = len(gt_m)
                gt_m.append(box_m)
                boxes_m.append(box_m)
            pairs.append((ic, im))
            break

    # distractors: same per-view marginals as lesion projections, one view only
    for img, gt_boxes, mlo_like in ((img_c, boxes_c, False), (img_m, boxes_m, True)):
        placed = 0
        for _attempt in range(60 * max(1, cfg.distractors)):
            if placed >= cfg.distractors:
                break
            x, y = rng.uniform(), rng.uniform()
            u = (x + y) / 2.0 if mlo_like else x
            r = int(rng.integers(cfg.radius_min, cfg.radius_max + 1))
            amp = rng.uniform(cfg.intensity_min, cfg.intensity_max)
            cx, cy = _place(rng, u, r, size)
            box = _blob_box(cx, cy, r, size)
            if not clear_of(box, gt_boxes):
                continue
            _render_blob(img, cx, cy, r, amp)
            placed += 1

    if cfg.noise > 0:
        img_c += cfg.noise * rng.uniform(size=(size, size))
        img_m += cfg.noise * rng.uniform(size=(size, size))

    if np.isscalar(seed):
        seed_id = int(seed)
    else:
        seed_id = int(np.random.SeedSequence(seed).generate_state(1)[0] % 2**31)
    sample = PairedSample(
        img_c=np.clip(img_c, 0.0, 1.0).astype(np.float32),
        img_m=np.clip(img_m, 0.0, 1.0).astype(np.float32),
        gt_c=np.array(gt_c).reshape(-1, 4),
        gt_m=np.array(gt_m).reshape(-1, 4),
        pairs=pairs,
        seed=seed_id,
    )
    return sample.validate()


def generate_dataset(base_seed: int, n: int, cfg: GenConfig) -> list:
    return [generate_case([int(base_seed), i], cfg) for i in range(n)]


# ---------------------------------------------------------------------------
# dataset file format: JSON lines, images as base64 little-endian float32


def _encode_image(img: np.ndarray) -> dict:
    arr = np.ascontiguousarray(img, dtype="<f4")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_image(obj, lineno: int) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
        arr = np.frombuffer(raw, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ValueError("payload size mismatch")
        return arr.reshape(shape).copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"line {lineno}: bad image payload ({exc})") from exc


def write_dataset(path, samples):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT_TAG, "count": len(samples)}) + "\n")
        for s in samples:
            rec = {
                "seed": s.seed,
                "img_c": _encode_image(s.img_c),
                "img_m": _encode_image(s.img_m),
                "gt_c": [list(map(float, b)) for b in s.gt_c],
                "gt_m": [list(map(float, b)) for b in s.gt_m],
                "pairs": [[p[0], p[1]] for p in s.pairs],
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line 1, offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise DatasetError(f"line 1: not a {FORMAT_TAG} file")
    count = header.get("count")
    body = [ln for ln in lines[1:] if ln.strip()]
    if count is not None and len(body) != count:
        raise DatasetError(f"truncated file: header says {count} samples, found {len(body)}")
    samples = []
    for lineno, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}, offset {exc.pos}: {exc.msg}") from exc
        try:
            pairs = [(p[0], p[1]) for p in rec["pairs"]]
            sample = PairedSample(
                img_c=_decode_image(rec["img_c"], lineno),
                img_m=_decode_image(rec["img_m"], lineno),
                gt_c=np.array(rec["gt_c"], dtype=np.float64).reshape(-1, 4),
                gt_m=np.array(rec["gt_m"], dtype=np.float64).reshape(-1, 4),
                pairs=pairs,
                seed=int(rec["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"line {lineno}: bad record ({exc})") from exc
        samples.append(sample.validate())
    return samples


# ---------------------------------------------------------------------------
# annotation sidecar: external detections (and optional pairs), no pixels


def write_annotations(path, records):
    """records: per sample {"det_c": (boxes, scores), "det_m": ..., "pairs": optional}."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": ANNOT_TAG, "count": len(records)}) + "\n")
        for rec in records:
            line = {}
            for view in ("det_c", "det_m"):
                boxes, scores = rec[view]
                line[view] = [list(map(float, b)) + [float(s)] for b, s in zip(boxes, scores)]
            if rec.get("pairs") is not None:
                line["pairs"] = [[p[0], p[1]] for p in rec["pairs"]]
            fh.write(json.dumps(line) + "\n")


def read_annotations(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line 1, offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("format") != ANNOT_TAG:
        raise DatasetError(f"line 1: not a {ANNOT_TAG} file")
    body = [ln for ln in lines[1:] if ln.strip()]
    if header.get("count") is not None and len(body) != header["count"]:
        raise DatasetError(f"truncated file: header says {header['count']} records, found {len(body)}")
    out = []
    for lineno, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
            parsed = {}
            for view in ("det_c", "det_m"):
                rows = np.array(rec[view], dtype=np.float64).reshape(-1, 5)
                parsed[view] = (rows[:, :4], rows[:, 4])
            parsed["pairs"] = [(p[0], p[1]) for p in rec["pairs"]] if "pairs" in rec else None
            out.append(parsed)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"line {lineno}: bad record ({exc})") from exc
    return out
