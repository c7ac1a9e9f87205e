"""``procns`` command line: synth, gen-sparse, train, eval, export-pseudo.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import CheckpointError, UNet, load_checkpoint
from .config import Config, ConfigError, load_config
from .data import DataError, dir_hash, load_dataset, read_label_dir, write_label_dir
from .evaluation import evaluate_labels, noise_suppression_report, save_predictions, write_error_map
from .pseudo_init import MissingSampleError
from .sparse_gen import annotation_stats, gen_sparse
from .synth import gen_synthetic_dataset
from .trainer import RunLog, make_state, predict_labels, run_full, run_initialization, run_main, write_manifest

log = logging.getLogger("procns")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def runs_root() -> Path:
    return Path(os.environ.get("PROCNS_RUNS_DIR", "runs"))


def _load(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "ablation", None):
        cfg.train.apply_ablation(args.ablation.split(","))
    return cfg


def _dataset_dir(args, cfg) -> Path:
    return Path(args.dataset if getattr(args, "dataset", None) else cfg.dataset.path)


def cmd_synth(args) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else Path(cfg.dataset.path)
    root = gen_synthetic_dataset(cfg.dataset, cfg.sparse_gen, out)
    man = json.loads((root / "manifest.json").read_text())
    print(f"wrote {len(man['ids'])} samples to {root} (hash {dir_hash(root)[:12]}, "
          f"mean sparse proportion {man['mean_sparse_proportion']})")
    return EXIT_OK


def cmd_gen_sparse(args) -> int:
    cfg = _load(args)
    if args.mode:
        cfg.sparse_gen.mode = args.mode
        cfg.sparse_gen.__post_init__()
    root = _dataset_dir(args, cfg)
    ds = load_dataset(root, split=None, sparse_dir="labels_full")
    if not ds.dense:
        raise DataError(f"no dense labels under {root / 'labels_full'}")
    out_name = args.out_subdir or f"labels_sparse_{cfg.sparse_gen.mode.lower()}"
    labels = {i: gen_sparse(ds.dense[i], cfg.sparse_gen, ds.num_classes) for i in ds.dense}
    write_label_dir(root / out_name, labels)
    props = [annotation_stats(labels[i], ds.dense[i])["proportion"] for i in labels]
    print(f"{cfg.sparse_gen.mode}: {len(labels)} labels in {root / out_name}, "
          f"mean proportion {np.mean(props):.4f}")
    return EXIT_OK


def _new_run_dir(args, stage, seed) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    return runs_root() / f"{time.strftime('%Y%m%d-%H%M%S')}-{stage}-s{seed}"


def cmd_train(args) -> int:
    cfg = _load(args)
    root = _dataset_dir(args, cfg)
    ds = load_dataset(root, "train", sparse_dir=args.sparse_dir)
    run_dir = _new_run_dir(args, args.stage, cfg.train.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.dump())
    runlog = RunLog(run_dir)
    runlog.add(run_dir / "config.yaml")
    model = None
    if args.resume:
        model, _ = load_checkpoint(args.resume, UNet(cfg.network))

    extra = {"command": "train", "stage": args.stage, "dataset": str(root)}
    if args.stage == "full":
        res = run_full(ds, cfg, run_dir, model=model, runlog=runlog)
        if res.main and res.main.dsc_curve:
            extra["denoised_label_dsc"] = res.main.dsc_curve
    elif args.stage == "init":
        state = make_state(cfg, cfg.train.init_epochs, len(ds), model=model) if model is not None else None
        run_initialization(ds, cfg, run_dir, state, runlog)
    else:
        label_dir = Path(args.pseudo_labels) if args.pseudo_labels else run_dir / "pseudo_init"
        if not label_dir.is_dir():
            raise DataError(f"Main stage needs pseudo-labels: {label_dir} not found "
                            "(pass --pseudo-labels DIR or run --stage init into this run dir)")
        labels = read_label_dir(label_dir, ds.ids)
        if model is None:
            own = run_dir / "checkpoints" / "init.pt"
            model = load_checkpoint(own, UNet(cfg.network))[0] if own.exists() else UNet(cfg.network)
        extra["pseudo_labels"] = str(label_dir)
        res = run_main(ds, labels, model, cfg, run_dir, runlog=runlog)
        extra["denoised_label_dsc"] = res.dsc_curve
    if args.resume:
        extra["resumed_from"] = str(args.resume)
    path = write_manifest(run_dir, cfg, dir_hash(root), runlog.artifacts, extra)
    print(f"run written to {run_dir} (manifest {path.name})")
    return EXIT_OK


def _resolve_checkpoint(target: Path) -> Path:
    if target.is_dir():
        for name in ("final.pt", "init.pt"):
            p = target / "checkpoints" / name
            if p.exists():
                return p
        raise DataError(f"no checkpoint in run dir; expected {target / 'checkpoints' / 'final.pt'}")
    if not target.exists():
        raise DataError(f"checkpoint not found: {target}")
    return target


def cmd_eval(args) -> int:
    cfg = _load(args)
    target = Path(args.run)
    ckpt = _resolve_checkpoint(target)
    run_dir = target if target.is_dir() else ckpt.parent.parent
    model, _ = load_checkpoint(ckpt)
    root = _dataset_dir(args, cfg)
    split = args.split or cfg.eval.split
    ds = load_dataset(root, split)
    if not ds.dense:
        raise DataError(f"no ground-truth labels for split {split!r} under {root / 'labels_full'}")
    out = Path(args.out) if args.out else run_dir / f"eval_{split}"
    preds = predict_labels(model, ds.images, ds.ids)
    report = evaluate_labels(preds, ds.dense, ds.num_classes)
    written = [report.write_csv(out / "metrics.csv")]
    save_predictions(out / "predictions", preds)
    written += [out / "predictions" / f"{i}.png" for i in ds.ids]
    if cfg.eval.error_maps and not args.no_error_maps:
        for i in ds.ids:
            written.append(write_error_map(out / "error_maps" / f"{i}.png", preds[i], ds.dense[i]))
    summary = {"checkpoint": str(ckpt), "split": split, "mean_dsc": report.mean_dsc,
               "mean_hd95": report.mean_hd95, "per_class": report.per_class()}
    if args.noise_report or cfg.eval.noise_report:
        train = load_dataset(root, "train")
        rows = noise_suppression_report(run_dir / "snapshots", train.dense, train.num_classes, out)
        summary["noise_suppression"] = rows
        written += [out / "noise_suppression.csv", out / "noise_suppression.png"]
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    written.append(out / "summary.json")
    if target.is_dir():
        write_manifest(run_dir, cfg, dir_hash(root), written, {"command": "eval", "split": split})
    print(f"{split}: mean DSC {report.mean_dsc:.4f}, mean HD95 {report.mean_hd95:.3f} -> {out}")
    return EXIT_OK


def cmd_export_pseudo(args) -> int:
    out = Path(args.out)
    if args.checkpoint:
        cfg = _load(args)
        ds = load_dataset(_dataset_dir(args, cfg), "train")
        model, _ = load_checkpoint(_resolve_checkpoint(Path(args.checkpoint)))
        write_label_dir(out, predict_labels(model, ds.images, ds.ids))
        print(f"exported {len(ds)} predicted labels to {out}")
        return EXIT_OK
    if not args.run:
        raise ConfigError("export-pseudo needs --run or --checkpoint")
    run = Path(args.run)
    src = run / "pseudo_init" if args.epoch is None else run / "snapshots" / f"epoch_{args.epoch:03d}"
    if not src.is_dir():
        raise DataError(f"pseudo-label directory not found: {src}")
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(src.glob("*.png"))
    for f in files:
        shutil.copy2(f, out / f.name)
    print(f"exported {len(files)} labels from {src} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="procns", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gen-sparse", help="derive sparse labels from labels_full")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--mode", choices=["POINT_SIDES", "POINT_CENTER", "SCRIBBLE", "BLOCK"])
    s.add_argument("--out-subdir")
    s.set_defaults(func=cmd_gen_sparse)

    s = sub.add_parser("train", help="train Initialization, Main, or both")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--stage", choices=["init", "main", "full"], default="full")
    s.add_argument("--pseudo-labels")
    s.add_argument("--resume", help="checkpoint to start from")
    s.add_argument("--ablation", help="comma list, e.g. no-anpm,no-noise")
    s.add_argument("--run-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--sparse-dir", default="labels_sparse")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a run dir or checkpoint")
    s.add_argument("run", help="run directory or checkpoint path")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--split")
    s.add_argument("--out")
    s.add_argument("--noise-report", action="store_true")
    s.add_argument("--no-error-maps", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-pseudo", help="copy a run's pseudo-labels or predict them from a checkpoint")
    s.add_argument("--run")
    s.add_argument("--epoch", type=int)
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_pseudo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MissingSampleError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, RuntimeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
