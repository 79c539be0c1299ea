"""Training loop (AdamW + cosine warmup schedule) and model evaluation.

Every source of randomness is derived from (seed, purpose, step), so a run
is reproducible and a resumed run replays the exact same batch sequence.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from . import losses as L
from . import model as mdl
from .config import ModelConfig, RunConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .linker import extract_pairs
from .metrics import (PairMetrics, froc, match_detections_to_gt, pair_metrics,
                      recall_at, RECALL_BUDGETS)
from .synthdata import PairedSample
from .tensor import Tape, backward
from . import tensor as T


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the diagnostic payload."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


class AdamW:
    """Decoupled weight decay Adam; per-name learning-rate multipliers."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, lr_mults: dict | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_mults = lr_mults or {}
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def _mult(self, name: str) -> float:
        for prefix, mult in self.lr_mults.items():
            if name.startswith(prefix):
                return mult
        return 1.0

    def step(self, lr_scale: float = 1.0):
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            lr = self.lr * lr_scale * self._mult(name)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name in self.m:
            self.m[name] = np.array(arrays[f"opt.m.{name}"])
            self.v[name] = np.array(arrays[f"opt.v.{name}"])
        self.step_count = step_count


def lr_schedule(cfg: RunConfig, step: int) -> float:
    """Warmup then cosine decay (or constant after warmup when disabled)."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return (step + 1) / cfg.warmup_steps
    if not cfg.cosine or cfg.steps <= cfg.warmup_steps:
        return 1.0
    progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def _flip_sample(sample: PairedSample) -> PairedSample:
    def flip_boxes(b):
        b = b.copy()
        if len(b):
            b[:, 0] = 1.0 - b[:, 0]
        return b
    return PairedSample(np.ascontiguousarray(sample.img_c[:, ::-1]),
                        np.ascontiguousarray(sample.img_m[:, ::-1]),
                        flip_boxes(sample.gt_c), flip_boxes(sample.gt_m),
                        sample.pairs, sample.seed)


def _crop_jitter(sample: PairedSample, rng) -> PairedSample:
    size = sample.img_c.shape[0]
    shift = 2.0 / size

    def shifted(img, boxes, dx, dy):
        b = boxes.copy()
        if len(b):
            b[:, 0] += dx / size
            b[:, 1] += dy / size
            if (b[:, 0] - b[:, 2] / 2 < 0).any() or (b[:, 0] + b[:, 2] / 2 > 1).any() \
               or (b[:, 1] - b[:, 3] / 2 < 0).any() or (b[:, 1] + b[:, 3] / 2 > 1).any():
                return img, boxes  # jitter would push a box out; skip
        out = np.zeros_like(img)
        xs0, xs1 = max(0, dx), min(size, size + dx)
        ys0, ys1 = max(0, dy), min(size, size + dy)
        out[ys0:ys1, xs0:xs1] = img[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
        return out, b

    dx, dy = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    img_c, gt_c = shifted(sample.img_c, sample.gt_c, dx, dy)
    img_m, gt_m = shifted(sample.img_m, sample.gt_m, dx, dy)
    return PairedSample(img_c, img_m, gt_c, gt_m, sample.pairs, sample.seed)


def _augment(sample: PairedSample, cfg: RunConfig, step: int, slot: int) -> PairedSample:
    if not (cfg.flip_augment or cfg.crop_augment):
        return sample
    rng = np.random.default_rng([cfg.seed, 7771, step, slot])
    if cfg.flip_augment and rng.uniform() < 0.5:
        sample = _flip_sample(sample)
    if cfg.crop_augment:
        sample = _crop_jitter(sample, rng)
    return sample


def train(cfg: RunConfig, dataset, log_fh=None, resume_path=None,
          checkpoint_path=None):
    """Run the configured number of steps; returns (model, optimizer, logs)."""
    cfg.validate()
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    model = mdl.init_parameters(cfg.model, cfg.seed)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                lr_mults={"linker.": cfg.linker_lr_mult})
    start_step = 0
    if resume_path is not None:
        arrays, meta = load_checkpoint(resume_path)
        start_step = int(meta["step"])
        model.params.load_arrays({k: v for k, v in arrays.items()
                                  if not k.startswith("opt.")})
        opt.load_state_arrays(arrays, start_step)

    logs = []
    for step in range(start_step, cfg.steps):
        idx = np.random.default_rng([cfg.seed, 1234, step]).integers(0, len(dataset),
                                                                     cfg.batch_size)
        model.params.zero_grad()
        report_sums = {"total": 0.0, "l_d": 0.0, "l_link": 0.0, "l_sim": 0.0, "l_cls": 0.0}
        try:
            for slot, i in enumerate(idx):
                sample = _augment(dataset[int(i)], cfg, step, slot)
                with Tape():
                    out = mdl.forward(model, sample.img_c, sample.img_m)
                    rep = L.total_loss(out, sample, cfg.model)
                    backward(T.mul(rep.loss, 1.0 / cfg.batch_size))
                for key in report_sums:
                    report_sums[key] += getattr(rep, key) / cfg.batch_size
            if not all(math.isfinite(v) for v in report_sums.values()):
                raise ValueError("non-finite loss")
        except (ValueError, ArithmeticError) as exc:
            if "non-finite" not in str(exc):
                raise
            dump = {"step": step, "batch_indices": [int(i) for i in idx],
                    "report": report_sums, "error": str(exc)}
            raise TrainingAborted(f"non-finite loss at step {step}", dump) from exc
        lr_scale = lr_schedule(cfg, step)
        opt.step(lr_scale)
        entry = {"step": step, "lr": cfg.lr * lr_scale, **report_sums}
        logs.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_model(checkpoint_path, model, opt, step + 1)
    if checkpoint_path:
        save_model(checkpoint_path, model, opt, cfg.steps)
    return model, opt, logs


def save_model(path, model: mdl.Model, opt: AdamW | None = None, step: int = 0):
    arrays = {name: p.data for name, p in model.params.items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {"step": step, "model": dataclasses.asdict(model.cfg)}
    save_checkpoint(path, arrays, meta)


def model_config_from_meta(meta: dict) -> ModelConfig:
    raw = dict(meta["model"])
    raw["backbone_channels"] = tuple(raw["backbone_channels"])
    from .nn import FocalConfig
    raw["focal"] = FocalConfig(**raw["focal"])
    raw["pv_focal"] = FocalConfig(**raw["pv_focal"])
    return ModelConfig(**raw)


def load_model(path) -> tuple:
    """Rebuild a Model from a checkpoint; returns (model, meta)."""
    arrays, meta = load_checkpoint(path)
    cfg = model_config_from_meta(meta)
    model = mdl.init_parameters(cfg, seed=0)
    model.params.load_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model, meta


def predict_sample(model: mdl.Model, sample: PairedSample, want_attn: bool = False):
    """Inference forward pass (no tape)."""
    return mdl.forward(model, sample.img_c, sample.img_m, want_attn=want_attn)


def attention_locality(model: mdl.Model, dataset) -> float:
    """Fraction of ground-truth pairs whose owning link query puts its
    maximal last-layer attention weight on that pair's detection slots in
    both views (dustbin slot included for one-view lesions)."""
    cfg = model.cfg
    last = cfg.linker_layers - 1
    hits = total = 0
    for sample in dataset:
        out = predict_sample(model, sample, want_attn=True)
        m = L.compute_matchings(out, sample, cfg)
        attn_c = out.attn[f"layer{last}_link_from_cc"]
        attn_m = out.attn[f"layer{last}_link_from_mlo"]
        for row, trip in enumerate(m.triplets):
            if trip.a == 0:
                continue
            q = m.link_perm[row]
            total += 1
            if int(np.argmax(attn_c[q])) == trip.e_c and \
               int(np.argmax(attn_m[q])) == trip.e_m:
                hits += 1
    return hits / total if total else 0.0


def evaluate(model: mdl.Model, dataset, iou_thr: float | None = None) -> dict:
    """FROC over all view-images plus pair metrics for linker variants.

    Detections from both views are pooled; each view counts as one image
    for the false-positives-per-image denominator.
    """
    cfg = model.cfg
    iou = cfg.iou_thr if iou_thr is None else iou_thr
    detections, gts = [], []
    pair_counts = PairMetrics()
    has_linker = model.linker is not None
    for sample in dataset:
        out = predict_sample(model, sample)
        for det, gt in ((out.det_c, sample.gt_c), (out.det_m, sample.gt_m)):
            detections.append((det.boxes_np(), det.scores_np()))
            gts.append(gt)
        if has_linker:
            pairs = extract_pairs(out.v_c, out.v_m, out.s, out.e_tilde_c, out.e_tilde_m,
                                  score_floor=cfg.score_floor)
            dustbin = cfg.n_queries
            pred_pairs = [(None if p.c_index == dustbin else p.c_index,
                           None if p.m_index == dustbin else p.m_index) for p in pairs]
            map_c = match_detections_to_gt(out.det_c.boxes_np(), out.det_c.scores_np(),
                                           sample.gt_c, iou)
            map_m = match_detections_to_gt(out.det_m.boxes_np(), out.det_m.scores_np(),
                                           sample.gt_m, iou)
            pair_counts.add(pair_metrics(pred_pairs, sample.pairs, map_c, map_m))
    curve = froc(detections, gts, iou_thr=iou)
    out = {
        "curve": curve,
        "recalls": {f"R@{b}": recall_at(curve, b) for b in RECALL_BUDGETS},
    }
    if has_linker:
        out["pairs"] = pair_counts
    return out
