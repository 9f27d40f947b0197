"""Command-line interface.

Subcommands: ``dataset`` (synthesize a shapes dataset), ``train``,
``sample`` (prior / reference / mixed modes), ``resample`` (per-instance
variants), ``eval`` (metric report: CSV plus figures), and ``grid``
(contact sheet from an image directory).

Every command echoes its effective configuration into the output
directory and is reproducible from (config, seed).  Exit codes: 0
success, 2 configuration error, 3 data error, 4 numeric failure; errors
are also written to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from . import config as config_mod
from . import engine, metrics, plotting
from .data import generate_shapes, load_dataset, save_dataset
from .errors import (
    ClassOutOfRange,
    ConfigInvalid,
    CorruptFile,
    DegenerateSet,
    DimensionMismatch,
    EmptyInstanceLabel,
    EpochOutOfRange,
    InadeError,
    InconsistentInstance,
    IndexOutOfRange,
    LabelOutOfRange,
    NoInstances,
    NonFiniteLoss,
    PairMismatch,
    SchemaMismatch,
    ShapeMismatch,
)
from .rng import derived_seed

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (ConfigInvalid, LabelOutOfRange, ClassOutOfRange, PairMismatch,
                  EpochOutOfRange, IndexOutOfRange, ShapeMismatch)
_DATA_ERRORS = (FileNotFoundError, CorruptFile, SchemaMismatch, DimensionMismatch,
                InconsistentInstance, EmptyInstanceLabel)
_NUMERIC_ERRORS = (NonFiniteLoss, DegenerateSet, NoInstances)


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigInvalid(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_args(out: Path, args: argparse.Namespace):
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "invocation.json").write_text(json.dumps(payload, indent=2, default=str))


def _load_config(args) -> config_mod.RunConfig:
    overrides = config_mod.parse_overrides(getattr(args, "set", None))
    return config_mod.load_run_config(getattr(args, "config", None), overrides)


def _parse_int_list(text: str) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise ConfigInvalid(f"expected comma-separated integers, got {text!r}") from exc


def cmd_dataset(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, seed=args.seed))
    out = _prepare_out_dir(args.out, args.force)
    dataset = generate_shapes(cfg.data)
    save_dataset(dataset, out)
    config_mod.echo_config(cfg, out)
    _echo_args(out, args)
    print(f"wrote {len(dataset)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    out = _prepare_out_dir(args.out, args.force)
    dataset = load_dataset(args.data)
    if dataset.config.num_classes != cfg.train.model.num_classes:
        raise ConfigInvalid(
            f"model expects {cfg.train.model.num_classes} classes but the dataset "
            f"has {dataset.config.num_classes}")
    model_dims = (cfg.train.model.height, cfg.train.model.width)
    data_dims = (dataset.config.image_size, dataset.config.image_size)
    if model_dims != data_dims:
        raise ConfigInvalid(
            f"model resolution {model_dims} != dataset resolution {data_dims}")
    if args.resume:
        state = engine.load_checkpoint(args.resume)
    else:
        state = engine.init_state(cfg.train)
    max_steps = args.steps
    if max_steps is None:
        max_steps = cfg.train.epochs * len(dataset) // cfg.train.batch_size
    config_mod.echo_config(cfg, out)
    _echo_args(out, args)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "samples").mkdir(exist_ok=True)

    preview = [dataset[i].pair for i in range(min(4, len(dataset)))]

    def hook(record):
        step = record["step"]
        if step % args.log_every == 0:
            parts = "  ".join(f"{k}={record[k]:.4f}" for k in
                              ("loss_d", "loss_g_total", "loss_perc"))
            print(f"step {step:6d} epoch {record['epoch']:4d}  {parts}", flush=True)
        if args.checkpoint_every and step % args.checkpoint_every == 0:
            engine.save_checkpoint(state, out / "checkpoints" / f"step_{step:07d}.ckpt")
        if args.sample_every and step % args.sample_every == 0:
            images = [engine.sample_prior(state.generator, pair, derived_seed(cfg.train.seed, 7, i))
                      for i, pair in enumerate(preview)]
            plotting.save_contact_sheet(images, out / "samples" / f"step_{step:07d}.png")
        return False

    history = engine.train_loop(state, dataset, max_steps, hook=hook,
                                log_file=out / "log.jsonl")
    engine.save_checkpoint(state, out / "checkpoints" / "final.ckpt")
    if history:
        with open(out / "losses.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(history[0]))
            writer.writeheader()
            writer.writerows(history)
        plotting.save_loss_curves(history, out / "loss_curves.png")
    print(f"trained to step {state.step}; checkpoint at {out / 'checkpoints' / 'final.ckpt'}")
    return 0


def _load_pair_source(args):
    dataset = load_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        raise ConfigInvalid(f"--index {args.index} outside dataset of {len(dataset)}")
    return dataset, dataset[args.index]


def cmd_sample(args) -> int:
    state = engine.load_checkpoint(args.checkpoint)
    dataset, sample = _load_pair_source(args)
    seeds = _parse_int_list(args.seeds)
    if not seeds:
        raise ConfigInvalid("--seeds must name at least one seed")
    out = _prepare_out_dir(args.out, args.force)
    _echo_args(out, args)
    reference_index = args.index if args.reference_index is None else args.reference_index
    if not 0 <= reference_index < len(dataset):
        raise ConfigInvalid(f"--reference-index {reference_index} outside dataset")
    reference = dataset[reference_index]
    images = []
    for seed in seeds:
        if args.mode == "prior":
            img = engine.sample_prior(state.generator, sample.pair, seed)
        elif args.mode == "reference":
            img = engine.sample_reference(state.generator, state.encoder,
                                          sample.pair, reference, seed)
        else:
            guided = _parse_int_list(args.instances)
            img = engine.sample_mixed(state.generator, state.encoder, sample.pair,
                                      reference, guided, seed)
        path = out / f"{args.mode}_s{seed}.png"
        plotting.save_image(img, path)
        images.append(img)
    plotting.save_contact_sheet(images, out / "sheet.png",
                                titles=[f"seed {s}" for s in seeds])
    print(f"wrote {len(images)} {args.mode} samples to {out}")
    return 0


def cmd_resample(args) -> int:
    state = engine.load_checkpoint(args.checkpoint)
    _, sample = _load_pair_source(args)
    if args.variants < 1:
        raise ConfigInvalid("--variants must be at least 1")
    out = _prepare_out_dir(args.out, args.force)
    _echo_args(out, args)
    images = [engine.sample_prior(state.generator, sample.pair, args.seed)]
    for j in range(1, args.variants):
        images.append(engine.resample_instance(
            state.generator, sample.pair, args.seed, args.instance,
            derived_seed(args.seed, 9, j)))
    for j, img in enumerate(images):
        plotting.save_image(img, out / f"variant_{j:02d}.png")
    titles = ["base"] + [f"redraw {j}" for j in range(1, len(images))]
    plotting.save_contact_sheet(images, out / "row.png",
                                cols=len(images), titles=titles)
    print(f"wrote {len(images)} variants of instance {args.instance} to {out}")
    return 0


def _write_report(report: metrics.DiversityReport, out: Path):
    rows = report.summary_rows()
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)
    breakdown = []
    for kind, records in (("instance", report.instance_records),
                          ("class", report.class_records)):
        for record in records:
            for target in record["targets"]:
                breakdown.append({
                    "kind": kind, "image": record["image"], "target": target["target"],
                    "inside": target["inside"], "outside": target["outside"]})
    if breakdown:
        with open(out / "breakdown.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(breakdown[0]))
            writer.writeheader()
            writer.writerows(breakdown)
    (out / "report.json").write_text(json.dumps(dataclasses.asdict(report), indent=2))
    plotting.save_metric_bars(rows, out / "metrics.png")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ev = cfg.eval
    if args.seed is not None:
        ev = dataclasses.replace(ev, seed=args.seed)
    if args.metrics:
        ev = dataclasses.replace(ev, metrics=tuple(args.metrics.split(",")))
    state = engine.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    subset = [dataset[i] for i in range(min(ev.images, len(dataset)))]
    out = _prepare_out_dir(args.out, args.force)
    config_mod.echo_config(cfg, out)
    _echo_args(out, args)
    sampler = engine.GeneratorSampler(state.generator)
    report = metrics.evaluate_model(
        sampler, subset, metrics=ev.metrics, groups=ev.groups, pairs=ev.pairs,
        resamples=ev.resamples, root_seed=ev.seed)
    _write_report(report, out)
    for name, value in report.summary_rows():
        print(f"{name:16s} {value:.6f}")
    print(f"report written to {out}")
    return 0


def cmd_grid(args) -> int:
    src = Path(args.images)
    if not src.is_dir():
        raise FileNotFoundError(f"image directory {src} does not exist")
    paths = sorted(src.glob("*.png"))
    if not paths:
        raise ConfigInvalid(f"no .png images found in {src}")
    images = [plotting.load_image(p) for p in paths]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plotting.save_contact_sheet(images, out, cols=args.cols,
                                titles=[p.stem for p in paths])
    print(f"wrote {len(images)}-image grid to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inade",
        description="Instance-adaptive denormalization: data, training, "
                    "sampling, and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML/JSON run configuration file")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a config value (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty output directory")

    p = sub.add_parser("dataset", help="generate and persist a shapes dataset")
    add_common(p)
    p.add_argument("--seed", type=int, help="override data.seed")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train on a stored dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, help="override the step budget")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--sample-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="synthesize images from a checkpoint")
    add_common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (pair source)")
    p.add_argument("--index", type=int, default=0, help="dataset index of the target pair")
    p.add_argument("--mode", choices=("prior", "reference", "mixed"), default="prior")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--reference-index", type=int,
                   help="dataset index of the reference (defaults to --index)")
    p.add_argument("--instances", default="",
                   help="guided instance labels for mixed mode, e.g. 2,3")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("resample", help="redraw one instance's noise repeatedly")
    add_common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--instance", type=int, required=True, help="1-based instance label")
    p.add_argument("--variants", type=int, default=4,
                   help="panel size; the first image is the base sample")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("eval", help="compute diversity/quality metrics")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", help="comma-separated subset of lpips,instance,class,fid")
    p.add_argument("--seed", type=int, help="override eval.seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="contact sheet from a directory of images")
    p.add_argument("--images", required=True, help="directory of .png images")
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--out", required=True, help="output figure path")
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        _report_error(exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        _report_error(exc, EXIT_DATA)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        _report_error(exc, EXIT_NUMERIC)
        return EXIT_NUMERIC


def _report_error(exc: Exception, code: int):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
