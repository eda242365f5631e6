"""Command-line surface: simulate, train, eval, adapt, gradcheck, render.

Every command is deterministic under (config, seed) and writes its outputs
under the output directory together with the config hash and a config echo.

Exit codes (documented in the README):
    0  success
    2  invalid configuration or arguments
    3  a required input file is missing
    4  training diverged (non-finite loss)
    1  unexpected internal error, or gradcheck failures
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointError
from .config import (ConfigError, EvalConfig, ExperimentConfig, config_hash,
                     load_config, save_config)
from .gradsuite import full_suite
from .metrics import MetricReport
from .model import load_model_checkpoint, save_model_checkpoint
from .pgm import write_pgm
from .scene import (DatasetError, PlacementError, SimDataset, export_dataset,
                    generate_dataset, load_external_dataset)
from .train import (AdaptConfig, LossLog, TrainingDiverged, adapt,
                    evaluate_dataset, run_full_training)

# dataset seeds derived from the experiment seed (documented rule)
TRAIN_SEED_OFFSET = 0
VAL_SEED_OFFSET = 1


def _train_seed(cfg: ExperimentConfig) -> int:
    return cfg.seed + TRAIN_SEED_OFFSET


def _val_seed(cfg: ExperimentConfig) -> int:
    return cfg.seed + VAL_SEED_OFFSET


def _write_echo(cfg: ExperimentConfig, out: Path) -> str:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_echo.yaml")
    return config_hash(cfg)


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def _report_row(tag, rep: MetricReport) -> list:
    return [tag, rep.tp, rep.fp, rep.fn,
            repr(rep.moda), repr(rep.modp), repr(rep.precision),
            repr(rep.recall), repr(rep.f1)]


# ---------------------------------------------------------------------------
# simulate


def _gen_chunk(payload):
    cfg, n_frames, seed, lo, hi = payload
    ds = generate_dataset(cfg, 0, seed)  # masks and model cameras only
    from .scene import generate_frame
    frames = []
    for i in range(lo, hi):
        rng_i = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        frames.append(generate_frame(cfg, rng_i, ds.masks, ds.model_cameras, ds.model_masks))
    return lo, frames


def generate_dataset_workers(cfg, n_frames: int, seed: int, workers: int) -> SimDataset:
    """Same result as generate_dataset for any worker count (per-frame sub-seeds)."""
    if workers <= 1 or n_frames < 8:
        return generate_dataset(cfg, n_frames, seed)
    base = generate_dataset(cfg, 0, seed)
    bounds = np.linspace(0, n_frames, workers + 1).astype(int)
    payloads = [(cfg, n_frames, seed, int(lo), int(hi))
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    frames = [None] * n_frames
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for lo, chunk in pool.map(_gen_chunk, payloads):
            frames[lo:lo + len(chunk)] = chunk
    base.frames = list(frames)
    return base


def cmd_simulate(args) -> int:
    cfg = _load_experiment(args)
    out = Path(cfg.output_dir)
    h = _write_echo(cfg, out)
    n = args.n_frames if args.n_frames is not None else cfg.n_train_frames
    ds = generate_dataset_workers(cfg.scene, n, _train_seed(cfg), args.workers)
    export_dataset(ds, out / "dataset")
    with open(out / "dataset" / "summary.yaml", "w") as f:
        yaml.safe_dump({"config_hash": h, "seed": _train_seed(cfg), "n_frames": n,
                        "gt_sigma_cells": float(cfg.scene.gt_sigma_cells)}, f, sort_keys=True)
    print(f"simulate: wrote {n} frames to {out / 'dataset'} (config {h})")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    out = Path(cfg.output_dir)
    h = _write_echo(cfg, out)
    train_ds = generate_dataset(cfg.scene, cfg.n_train_frames, _train_seed(cfg))
    val_ds = generate_dataset(cfg.scene, cfg.n_val_frames, _val_seed(cfg))
    cfg.train.seed = cfg.seed
    log = LossLog()
    params = run_full_training(train_ds, val_ds, cfg.model, cfg.train, log=log)
    ckpt = out / "checkpoint.ckpt"
    save_model_checkpoint(ckpt, params, cfg.model)
    (out / "loss_log.csv").write_text(f"# config_hash={h}\n" + log.to_csv())
    rep = evaluate_dataset(val_ds, params, cfg.model, cfg.train.views_per_sample,
                           resamples=cfg.eval.resamples, seed=cfg.seed,
                           threshold=cfg.eval.threshold,
                           nms_radius=cfg.eval.nms_radius_cells,
                           t_cells=cfg.eval.t_cells, t_meters=cfg.eval.t_meters)
    summary = {"config_hash": h, "seed": cfg.seed,
               "gt_sigma_cells": float(cfg.scene.gt_sigma_cells),
               "dataset_seeds": {"train": _train_seed(cfg), "val": _val_seed(cfg)},
               "val_metrics": rep.as_dict(),
               "checkpoint": str(ckpt)}
    with open(out / "summary.yaml", "w") as f:
        yaml.safe_dump(summary, f, sort_keys=True)
    print(f"train: val MODA={rep.moda:.3f} F1={rep.f1:.3f} -> {ckpt} (config {h})")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _load_experiment(args)
    out = Path(cfg.output_dir)
    h = _write_echo(cfg, out)
    params = load_model_checkpoint(args.checkpoint, cfg.model)
    if args.data is not None:
        ds = load_external_dataset(args.data)
    else:
        ds = generate_dataset(cfg.scene, cfg.n_val_frames, _val_seed(cfg))
    counts = args.view_counts or cfg.eval.view_counts
    ev: EvalConfig = cfg.eval
    summary = {"config_hash": h, "seed": cfg.seed,
               "dataset_seed": _val_seed(cfg) if args.data is None else None,
               "protocol": {"resamples": ev.resamples,
                            "threshold": ev.threshold,
                            "nms_radius_cells": ev.nms_radius_cells,
                            "t_cells": ev.t_cells, "t_meters": ev.t_meters,
                            "gt": "people inside the union of the selected views' masks"},
               "gt_sigma_cells": float(ds.gt_sigma_cells),
               "per_view_count": {}}
    for k in counts:
        collect = [] if args.dump_maps else None
        rep = evaluate_dataset(ds, params, cfg.model, views=k, resamples=ev.resamples,
                               seed=cfg.seed, threshold=ev.threshold,
                               nms_radius=ev.nms_radius_cells, t_cells=ev.t_cells,
                               t_meters=ev.t_meters, collect_frames=collect)
        summary["per_view_count"][int(k)] = rep.as_dict()
        path = out / f"report_views{k}.csv"
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow([f"# config_hash={h}"])
            wr.writerow(["frame", "tp", "fp", "fn", "moda", "modp",
                         "precision", "recall", "f1"])
            from .metrics import report as metric_report
            for i, (_, mr, _) in enumerate(collect or []):
                wr.writerow(_report_row(i, metric_report(mr, ev.t_cells, ev.t_meters)))
            wr.writerow(_report_row("aggregate", rep))
        if args.dump_maps and collect:
            for i, (fo, _, subset) in enumerate(collect[:args.dump_maps]):
                arrays = {"scene_pred": fo.scene_pred[0]}
                for j, v in enumerate(fo.view_indices):
                    arrays[f"view_pred_{v}"] = fo.view_preds[j][0]
                    arrays[f"weight_{v}"] = fo.weight_maps[j][0]
                np.savez(out / f"maps_views{k}_frame{i}.npz", **arrays)
        print(f"eval: views={k} MODA={rep.moda:.3f} F1={rep.f1:.3f} "
              f"P={rep.precision:.3f} R={rep.recall:.3f}")
    with open(out / "eval_summary.yaml", "w") as f:
        yaml.safe_dump(summary, f, sort_keys=True)
    return 0


# ---------------------------------------------------------------------------
# adapt


def cmd_adapt(args) -> int:
    cfg = _load_experiment(args)
    out = Path(cfg.output_dir)
    h = _write_echo(cfg, out)
    target_cfg = load_config(args.target_config)
    target_cfg.validate()
    acfg = cfg.adapt if cfg.adapt is not None else AdaptConfig()
    acfg.seed = cfg.seed
    cfg.train.seed = cfg.seed
    params = load_model_checkpoint(args.checkpoint, cfg.model)
    source_ds = generate_dataset(cfg.scene, cfg.n_train_frames, _train_seed(cfg))
    target_train = generate_dataset(target_cfg.scene, target_cfg.n_train_frames,
                                    _train_seed(target_cfg))
    target_val = generate_dataset(target_cfg.scene, target_cfg.n_val_frames,
                                  _val_seed(target_cfg))

    def _eval(p):
        return evaluate_dataset(target_val, p, cfg.model,
                                min(cfg.train.views_per_sample, target_val.n_views),
                                resamples=cfg.eval.resamples, seed=cfg.seed,
                                threshold=cfg.eval.threshold,
                                nms_radius=cfg.eval.nms_radius_cells,
                                t_cells=cfg.eval.t_cells, t_meters=cfg.eval.t_meters)

    before = _eval(params)
    log = LossLog()
    params = adapt(source_ds, target_train, params, cfg.model, cfg.train, acfg, log=log)
    after = _eval(params)
    ckpt = out / "adapted.ckpt"
    save_model_checkpoint(ckpt, params, cfg.model)
    (out / "adapt_loss_log.csv").write_text(f"# config_hash={h}\n" + log.to_csv())
    with open(out / "adapt_report.yaml", "w") as f:
        yaml.safe_dump({"config_hash": h, "seed": cfg.seed,
                        "before": before.as_dict(), "after": after.as_dict()},
                       f, sort_keys=True)
    print(f"adapt: target val MODA {before.moda:.3f} -> {after.moda:.3f}; wrote {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck and render


def cmd_gradcheck(args) -> int:
    results = full_suite(seed=args.seed if args.seed is not None else 0)
    all_ok = True
    lines = []
    for name, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        all_ok &= rep.passed
        line = f"{status} {name}: max_rel_error={rep.max_rel_error:.3e} (tol {rep.tolerance:.0e})"
        lines.append(line)
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck_report.txt").write_text("\n".join(lines) + "\n")
    print("gradcheck: all passed" if all_ok else "gradcheck: FAILURES present")
    return 0 if all_ok else 1


def cmd_render(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"map file not found: {src}")
    out = Path(args.out or src.parent)
    out.mkdir(parents=True, exist_ok=True)
    if src.suffix == ".npy":
        arrays = {src.stem: np.load(src)}
    elif src.suffix == ".npz":
        with np.load(src) as z:
            arrays = {k: z[k] for k in z.files}
    else:
        raise ConfigError(f"render: unsupported input '{src.suffix}', expected .npy or .npz")
    for name, arr in sorted(arrays.items()):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 2:
            raise ConfigError(f"render: array '{name}' has shape {arr.shape}, expected 2-D")
        # shared scale: values clipped to [0, 1] map linearly to 0..255
        write_pgm(out / f"{src.stem}_{name}.pgm", arr)
        print(f"render: wrote {out / f'{src.stem}_{name}.pgm'}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewfusion",
                                     description="Multi-view ground-plane people detection workbench")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=False, help="experiment config YAML")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker processes for frame-parallel work")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate and export a dataset")
    p.add_argument("--n-frames", type=int, default=None)
    p.set_defaults(func=cmd_simulate, needs_config=True)

    p = sub.add_parser("train", parents=[common], help="run the 3-stage training")
    p.set_defaults(func=cmd_train, needs_config=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint over view counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="evaluate an exported dataset directory "
                                                "instead of regenerating from the config")
    p.add_argument("--view-counts", type=int, nargs="+", default=None)
    p.add_argument("--dump-maps", type=int, default=0,
                   help="dump forward maps for the first N frames to .npz")
    p.set_defaults(func=cmd_eval, needs_config=True)

    p = sub.add_parser("adapt", parents=[common], help="domain-adapt a checkpoint to a new scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-config", required=True, help="experiment config of the target scene")
    p.set_defaults(func=cmd_adapt, needs_config=True)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks for all ops and the full model")
    p.set_defaults(func=cmd_gradcheck, needs_config=False)

    p = sub.add_parser("render", parents=[common], help="render map arrays to PGM heatmaps")
    p.add_argument("--input", required=True, help=".npy or .npz map file")
    p.set_defaults(func=cmd_render, needs_config=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_config", False) and not args.config:
        print("error: --config is required for this command", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (ConfigError, CheckpointError, DatasetError, PlacementError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
