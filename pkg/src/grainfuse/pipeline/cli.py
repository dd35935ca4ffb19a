"""Command-line front end.

Subcommands cover the full loop: gen-data builds the synthetic dataset,
train fits one modality's denoiser, reconstruct draws posterior sets for
held-out slices, evaluate scores persisted reconstructions, sweep runs
the factorial observation-pattern study, and plot renders CSV outputs.

All commands share one directory layout rooted at --workdir:

    dataset/          volumes + dataset.json
    checkpoints/      <modality>.gftc + loss history CSV
    recon/<cond>/     one reconstruction set per slice
    eval/<cond>/      metrics.csv + exported images
    sweep/            rows.csv + summary.csv

Every command writes the fully resolved config next to its outputs, and
all seeds ride inside the configs and file metadata, so any output can
be regenerated bit-for-bit by re-running the printed command single
threaded. Exit codes: 0 success, 2 config or format problems, 3
numerical divergence, 4 incompatible inputs.

The GRAINFUSE_WORKERS environment variable bounds both torch's thread
count and sweep-cell concurrency; unset means single threaded.
"""

import argparse
import csv
import os
import sys
import threading

import numpy as np
import torch
import yaml

from .. import metrics
from ..errors import (
    ConfigError,
    IncompatibilityError,
    NumericalDivergenceError,
    TensorFormatError,
)
from ..solver import parse_mask_spec
from . import config as config_mod
from . import dataset as dataset_mod
from . import experiments, images

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INCOMPATIBLE = 4

_EVAL_LABELS = (
    "condition",
    "slice",
    "align_trained",
    "align_val_mse",
    "align_unaligned_mse",
)


def _workers():
    raw = os.environ.get("GRAINFUSE_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(
            f"GRAINFUSE_WORKERS must be an integer, got {raw!r}"
        )


def _add_common(parser):
    parser.add_argument("--config", default=None,
                        help="YAML config file merged over the defaults")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY.PATH=VALUE", dest="overrides",
                        help="config override; repeatable, wins over the file")
    parser.add_argument("--workdir", default=None,
                        help="artifact root (default: the config output_dir)")


def _setup(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    workdir = args.workdir or cfg["output_dir"]
    cfg["output_dir"] = workdir
    return cfg, workdir


def _write_resolved(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    config_mod.save_config(cfg, os.path.join(out_dir, "config.yaml"))


def _require_checkpoint(workdir, modality):
    path = os.path.join(workdir, "checkpoints", f"{modality}.gftc")
    if not os.path.exists(path):
        raise ConfigError(
            f"no checkpoint for modality {modality!r} at {path}; run "
            f"'grainfuse train --modality {modality}' first"
        )
    model, meta = experiments.load_checkpoint(path)
    if meta.get("modality") != modality:
        raise IncompatibilityError(
            f"checkpoint {path} was trained for modality "
            f"{meta.get('modality')!r}, not {modality!r}"
        )
    return model, meta


def cmd_gen_data(args):
    cfg, workdir = _setup(args)
    ddir = os.path.join(workdir, "dataset")
    dataset = dataset_mod.build_dataset(cfg["dataset"], ddir)
    _write_resolved(cfg, ddir)
    n_train = len(dataset.train)
    n_val = len(dataset.val)
    print(f"dataset: {n_train} training + {n_val} validation volumes "
          f"-> {ddir}")
    return EXIT_OK


def cmd_train(args):
    cfg, workdir = _setup(args)
    dataset = experiments.ensure_dataset(cfg, workdir)
    steps = cfg["train"]["steps"]

    def progress(row):
        val = "" if row["val_loss"] is None else f"  val {row['val_loss']:.2f}"
        print(f"[{args.modality}] step {row['step']}/{steps}  "
              f"loss {row['loss']:.2f}{val}", flush=True)

    ckpt_dir = os.path.join(workdir, "checkpoints")
    path = os.path.join(ckpt_dir, f"{args.modality}.gftc")
    model, meta = experiments.ensure_model(
        cfg, dataset, args.modality, workdir, progress=progress
    )
    _write_resolved(cfg, ckpt_dir)
    print(f"checkpoint: {path}  best val {meta['best_val']:.2f} "
          f"at step {meta['best_step']} "
          f"(init {meta['init_val_loss']:.2f})")
    return EXIT_OK


def cmd_reconstruct(args):
    cfg, workdir = _setup(args)
    observe = cfg["observe"]
    if args.modality is not None:
        observe["modality"] = args.modality
    if args.mask is not None:
        observe["mask"] = args.mask
    if args.sigma_y is not None:
        observe["sigma_y"] = args.sigma_y
    if args.pl_perturb is not None:
        observe["pl_perturb"] = args.pl_perturb
    if args.assume_sigma is not None:
        observe["assume_sigma"] = args.assume_sigma
    parse_mask_spec(observe["mask"])

    dataset = experiments.ensure_dataset(cfg, workdir)
    model, _ = _require_checkpoint(workdir, observe["modality"])
    n = cfg["solver"]["n_reconstructions"] if args.n is None else args.n
    indices = args.slice or [int(observe["slice_index"])]

    name = experiments.condition_name(observe, cfg["solver"], n=n)
    rdir = os.path.join(workdir, "recon", name)
    for index in indices:
        eval_slice = dataset_mod.eval_slice_by_index(dataset, index)
        path = os.path.join(rdir, f"slice_{index:03d}.gftc")
        cached = os.path.exists(path)
        experiments.ensure_reconstruction(
            model, eval_slice, observe, cfg["solver"], workdir, n=n
        )
        state = "cached" if cached else "written"
        print(f"{state}: {path}")
    _write_resolved(cfg, rdir)
    return EXIT_OK


def _recon_files(path):
    if os.path.isfile(path):
        return [path]
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f)
            for f in os.listdir(path)
            if f.startswith("slice_") and f.endswith(".gftc")
        )
        if files:
            return files
    raise ConfigError(f"no reconstruction sets found at {path}")


def cmd_evaluate(args):
    cfg, workdir = _setup(args)
    task_names = (
        tuple(t.strip() for t in args.tasks.split(",") if t.strip())
        if args.tasks
        else tuple(cfg["evaluate"]["tasks"])
    )
    dataset = experiments.ensure_dataset(cfg, workdir)
    sym = dataset.symmetry
    files = _recon_files(args.recon)
    condition = os.path.basename(os.path.dirname(os.path.abspath(files[0])))
    out_dir = os.path.join(workdir, "eval", condition)
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for path in files:
        rset, meta = experiments.load_reconstruction_set(path)
        eval_slice = dataset_mod.slice_from_address(dataset, meta["slice"])
        collect = {}
        report = experiments.evaluate_slice(
            rset,
            eval_slice,
            sym=sym,
            task_names=task_names,
            seed=int(cfg["evaluate"]["seed"]) + eval_slice.index,
            labels={"condition": condition, "slice": eval_slice.index},
            collect=collect,
        )
        stem = os.path.join(out_dir, f"slice_{eval_slice.index:03d}")
        if "gradient_mean" in collect:
            images.save_image(
                f"{stem}_gradient.png", images.to_uint8(collect["gradient_mean"])
            )
            images.save_boundary_image(
                f"{stem}_boundary.png", collect["boundary_map"]
            )
        if "aligned_field" in collect:
            images.save_field_image(
                f"{stem}_orientation.png", collect["aligned_field"]
            )
        if "denoised_pl" in collect:
            images.save_field_image(
                f"{stem}_denoised.png", collect["denoised_pl"]
            )
        rows.append(report.to_row(_EVAL_LABELS))
        print(f"slice {eval_slice.index:3d}  "
              f"gbce {report.gbce:.4f}  "
              f"chamfer {report.chamfer_total:.5f}  "
              f"pl_mse {report.pl_mse:.5f}")

    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _write_resolved(cfg, out_dir)
    print(f"metrics: {csv_path}")
    return EXIT_OK


def cmd_sweep(args):
    cfg, workdir = _setup(args)
    masks = [m.strip() for m in args.masks.split(",") if m.strip()]
    n_values = [int(v) for v in args.n_values.split(",") if v.strip()]
    if not masks or not n_values:
        raise ConfigError("sweep needs at least one mask and one n value")
    for m in masks:
        parse_mask_spec(m)

    dataset = experiments.ensure_dataset(cfg, workdir)
    sym = dataset.symmetry
    modality = cfg["observe"]["modality"]
    model, _ = _require_checkpoint(workdir, modality)
    slices = dataset_mod.eval_slices(dataset)[: args.slices]
    task_names = tuple(cfg["evaluate"]["tasks"])

    out_dir = os.path.join(workdir, "sweep")
    os.makedirs(out_dir, exist_ok=True)
    rows_path = os.path.join(out_dir, "rows.csv")
    fieldnames = list(
        metrics.MetricReport().to_row(("mask", "n", "repeat", "slice")).keys()
    )
    lock = threading.Lock()
    rows_fh = open(rows_path, "w", newline="")
    writer = csv.DictWriter(rows_fh, fieldnames=fieldnames)
    writer.writeheader()

    def evaluate_cell(mask, n, repeat, seed):
        reports = []
        for eval_slice in slices:
            observe = dict(cfg["observe"])
            observe["mask"] = mask
            rng = np.random.default_rng((seed, eval_slice.index))
            observation, _ = experiments.build_observation(
                eval_slice, observe, rng=rng
            )
            rset = experiments.reconstruct_observation(
                model,
                observation,
                cfg["solver"],
                n=n,
                seed=experiments.slice_solver_seed(seed, eval_slice.index),
            )
            reports.append(
                experiments.evaluate_slice(
                    rset,
                    eval_slice,
                    sym=sym,
                    task_names=task_names,
                    seed=int(cfg["evaluate"]["seed"]) + eval_slice.index,
                    labels={"slice": eval_slice.index},
                )
            )
        return reports

    def on_result(mask, n, repeat, reports):
        with lock:
            writer.writerows(
                r.to_row(("mask", "n", "repeat", "slice")) for r in reports
            )
            rows_fh.flush()
        print(f"cell mask={mask} n={n} repeat={repeat}: "
              f"{len(reports)} slices", flush=True)

    try:
        result = metrics.sweep(
            evaluate_cell,
            masks,
            n_values,
            repeats=args.repeats,
            base_seed=int(cfg["solver"]["seed"]),
            on_result=on_result,
            workers=_workers(),
        )
    finally:
        rows_fh.close()

    # Rewrite the incrementally streamed rows in canonical order now that
    # the sweep finished; on failure the streamed partial rows remain.
    with open(rows_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(result.rows)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.summary[0].keys()))
        writer.writeheader()
        writer.writerows(result.summary)
    _write_resolved(cfg, out_dir)
    print(f"sweep: {len(result.rows)} rows -> {rows_path}")
    return EXIT_OK


def _mask_fraction(text):
    spec = parse_mask_spec(text)
    if spec.kind == "none":
        return 0.0
    if spec.kind == "random":
        return float(spec.param)
    return 1.0 / float(spec.param) ** 2


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{args.csv} has no data rows")
    os.makedirs(args.out, exist_ok=True)

    if args.kind == "sweep":
        metric = args.metric
        mean_key = f"{metric}_mean"
        if mean_key not in rows[0]:
            raise ConfigError(
                f"{args.csv} has no column {mean_key!r}; is this a sweep "
                f"summary file?"
            )
        fig, ax = plt.subplots(figsize=(6, 4))
        by_n = {}
        for row in rows:
            by_n.setdefault(int(row["n"]), []).append(row)
        for n, group in sorted(by_n.items()):
            group = sorted(group, key=lambda r: _mask_fraction(r["mask"]))
            x = [_mask_fraction(r["mask"]) for r in group]
            y = [float(r[mean_key]) for r in group]
            band = [float(r[f"{metric}_band"]) for r in group]
            ax.plot(x, y, marker="o", label=f"N={n}")
            if not any(np.isnan(band)):
                lo = [yi - bi for yi, bi in zip(y, band)]
                hi = [yi + bi for yi, bi in zip(y, band)]
                ax.fill_between(x, lo, hi, alpha=0.2)
        ax.set_xlabel("observed EBSD pixel fraction")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        out = os.path.join(args.out, f"{metric}_vs_fraction.png")
    elif args.kind == "history":
        fig, ax = plt.subplots(figsize=(6, 4))
        steps = [int(r["step"]) for r in rows]
        loss = [float(r["loss"]) if r["loss"] else np.nan for r in rows]
        val = [float(r["val_loss"]) if r["val_loss"] else np.nan for r in rows]
        ax.plot(steps, loss, label="train", alpha=0.7)
        mask = ~np.isnan(val)
        ax.plot(np.asarray(steps)[mask], np.asarray(val)[mask],
                marker="o", label="validation")
        ax.set_xlabel("step")
        ax.set_ylabel("denoising loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        out = os.path.join(args.out, "history.png")
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")

    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"plot: {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="grainfuse",
        description="Synthetic microstructure reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build the synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one modality's denoiser")
    _add_common(p)
    p.add_argument("--modality", required=True, choices=dataset_mod.MODALITIES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct",
                       help="draw posterior reconstruction sets")
    _add_common(p)
    p.add_argument("--modality", choices=dataset_mod.MODALITIES)
    p.add_argument("--mask", help="EBSD mask spec, e.g. grid(4) or none")
    p.add_argument("--sigma-y", type=float, dest="sigma_y",
                   help="observation noise level")
    p.add_argument("--pl-perturb", dest="pl_perturb",
                   help="PL perturbation spec, e.g. gaussian(0.05)")
    p.add_argument("--assume-sigma", type=float, dest="assume_sigma",
                   help="noise level the solver assumes, when different")
    p.add_argument("--slice", action="append", type=int,
                   help="evaluation slice index; repeatable")
    p.add_argument("--n", type=int, help="reconstructions per slice")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score persisted reconstructions")
    _add_common(p)
    p.add_argument("--recon", required=True,
                   help="reconstruction file or condition directory")
    p.add_argument("--tasks", help="comma list, default from config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep",
                       help="factorial study over masks and set sizes")
    _add_common(p)
    p.add_argument("--masks", default="none,grid(4),grid(2)",
                   help="comma list of mask specs")
    p.add_argument("--n-values", default="1,10", dest="n_values",
                   help="comma list of reconstruction-set sizes")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--slices", type=int, default=20,
                   help="how many canonical eval slices to score")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render CSV outputs as figures")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("sweep", "history"), default="sweep")
    p.add_argument("--metric", default="chamfer_total")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        torch.set_num_threads(_workers())
        return args.func(args)
    except NumericalDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except IncompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, TensorFormatError, yaml.YAMLError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
