"""Command-line interface.

Subcommands: gen-data, train, eval, match, gradcheck, dump-attention.
Configuration comes from an optional key = value file plus repeatable
--set overrides; the CLNET_SEED environment variable overrides the seed.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import losses as L
from . import model as mdl
from . import train as tr
from .checkpoint import CheckpointError
from .config import RunConfig, load_run_config
from .linker import extract_pairs
from .metrics import (curve_to_csv, format_recall_table, froc, match_detections_to_gt,
                      pair_metrics, PairMetrics, RECALL_BUDGETS, recall_at)
from .nn import ConfigError
from .synthdata import (DatasetError, generate_dataset, read_annotations,
                        read_dataset, write_dataset)
from .tensor import finite_diff_check


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.set or [])
    env_seed = os.environ.get("CLNET_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"CLNET_SEED must be an integer, got {env_seed!r}")
    return cfg


def _add_common(p):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    out = Path(args.out or cfg.dataset)
    samples = generate_dataset(cfg.seed, cfg.n_samples, cfg.gen)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, samples)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    dataset = read_dataset(cfg.dataset)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    log_path = out_dir / "train_log.jsonl"
    try:
        with open(log_path, "a" if args.resume else "w", encoding="utf-8") as log_fh:
            tr.train(cfg, dataset, log_fh=log_fh, resume_path=args.resume,
                     checkpoint_path=ckpt_path)
    except tr.TrainingAborted as exc:
        dump_path = out_dir / "nan_dump.json"
        dump_path.write_text(json.dumps(exc.dump, indent=2))
        print(f"aborted: {exc} (diagnostics in {dump_path})", file=sys.stderr)
        return 1
    print(f"trained {cfg.steps} steps -> {ckpt_path}")
    return 0


def _row_label(model) -> str:
    cfg = model.cfg
    if cfg.variant in ("clnet", "linker_only"):
        return f"{cfg.variant}[{cfg.cost_form}]"
    return cfg.variant


def _eval_external(path, dataset, iou_thr):
    records = read_annotations(path)
    if len(records) != len(dataset):
        raise DatasetError(f"{len(records)} detection records for {len(dataset)} samples")
    detections, gts = [], []
    pair_counts = PairMetrics()
    has_pairs = False
    for rec, sample in zip(records, dataset):
        for view, gt in (("det_c", sample.gt_c), ("det_m", sample.gt_m)):
            boxes, scores = rec[view]
            detections.append((boxes, scores))
            gts.append(gt)
        if rec.get("pairs") is not None:
            has_pairs = True
            map_c = match_detections_to_gt(*rec["det_c"], sample.gt_c, iou_thr)
            map_m = match_detections_to_gt(*rec["det_m"], sample.gt_m, iou_thr)
            pair_counts.add(pair_metrics(rec["pairs"], sample.pairs, map_c, map_m))
    curve = froc(detections, gts, iou_thr=iou_thr)
    out = {"curve": curve,
           "recalls": {f"R@{b}": recall_at(curve, b) for b in RECALL_BUDGETS}}
    if has_pairs:
        out["pairs"] = pair_counts
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = read_dataset(args.dataset or cfg.dataset)
    rows = []
    results = []
    if args.detections:
        res = _eval_external(args.detections, dataset, cfg.model.iou_thr)
        rows.append(("external", res["curve"]))
        results.append(("external", res))
    for ckpt in args.checkpoint or []:
        model, _ = tr.load_model(ckpt)
        res = tr.evaluate(model, dataset)
        label = _row_label(model)
        rows.append((label, res["curve"]))
        results.append((label, res))
    if not rows:
        raise ConfigError("eval needs --checkpoint and/or --detections")
    print(format_recall_table(rows))
    for label, res in results:
        if "pairs" in res:
            pm = res["pairs"]
            print(f"pairs[{label}]: precision={pm.precision:.3f} recall={pm.recall:.3f} "
                  f"exact={pm.exact_pair_accuracy:.3f}")
    if args.curve_csv:
        base = Path(args.curve_csv)
        for label, res in results:
            path = base if len(results) == 1 else \
                base.with_name(f"{base.stem}_{label}{base.suffix}")
            path.write_text(curve_to_csv(res["curve"]))
    return 0


def cmd_match(args) -> int:
    cfg = _load_config(args)
    model, _ = tr.load_model(args.checkpoint)
    if model.linker is None:
        raise ConfigError(f"variant {model.cfg.variant!r} has no link queries to match with")
    dataset = read_dataset(args.dataset or cfg.dataset)
    dustbin = model.cfg.n_queries
    fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i, sample in enumerate(dataset):
            out = tr.predict_sample(model, sample)
            for p in extract_pairs(out.v_c, out.v_m, out.s, out.e_tilde_c, out.e_tilde_m,
                                   score_floor=model.cfg.score_floor):
                rec = {
                    "sample": i,
                    "query_id": p.query_id,
                    "cc_index": "dustbin" if p.c_index == dustbin else p.c_index,
                    "mlo_index": "dustbin" if p.m_index == dustbin else p.m_index,
                    "score": p.score,
                }
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    from .synthdata import generate_case
    sample = generate_case([cfg.seed, 424242], cfg.gen)
    model = mdl.init_parameters(cfg.model, cfg.seed)
    # nudge zero-initialized projections off the symmetric init so the
    # matching is not at an exact tie (the loss is piecewise smooth)
    rng = np.random.default_rng([cfg.seed, 515151])
    for name, p in model.params.items():
        if p.data.ndim == 2 and np.all(p.data == 0.0):
            p.data[:] = rng.normal(size=p.shape) * 0.05
    frozen = L.compute_matchings(
        mdl.forward(model, sample.img_c, sample.img_m), sample, cfg.model)

    def f():
        out = mdl.forward(model, sample.img_c, sample.img_m)
        return L.total_loss(out, sample, cfg.model, matchings=frozen).loss

    report = finite_diff_check(f, model.params.as_dict(), eps=args.eps, tol=args.tol,
                               max_entries_per_param=args.max_entries, seed=cfg.seed)
    print(json.dumps(report.to_dict(), indent=2))
    return 0 if report.passed else 1


def cmd_dump_attention(args) -> int:
    cfg = _load_config(args)
    model, _ = tr.load_model(args.checkpoint)
    dataset = read_dataset(args.dataset or cfg.dataset)
    if not 0 <= args.sample < len(dataset):
        raise ConfigError(f"sample index {args.sample} out of range ({len(dataset)} samples)")
    out = tr.predict_sample(model, dataset[args.sample], want_attn=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not out.attn:
        raise ConfigError(f"variant {model.cfg.variant!r} exposes no attention maps")
    for key, mat in sorted(out.attn.items()):
        path = out_dir / f"{key}.csv"
        lines = [",".join(repr(float(v)) for v in row) for row in mat]
        path.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(out.attn)} matrices to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clnet",
        description="cross-view lesion detection with learned pairwise correspondence")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic two-view dataset")
    _add_common(p)
    p.add_argument("--out", default=None, help="output dataset path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="FROC table and pair metrics")
    _add_common(p)
    p.add_argument("--checkpoint", action="append", help="checkpoint path, repeatable")
    p.add_argument("--dataset", default=None)
    p.add_argument("--detections", default=None, help="external detections (annotation file)")
    p.add_argument("--curve-csv", default=None, help="write the FROC curve here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("match", help="emit extracted pairs as JSON lines")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=3,
                   help="entries probed per parameter tensor")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="write attention matrices as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
