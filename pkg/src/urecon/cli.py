"""Command-line entry point for the reconstruction pipeline.

Subcommands cover the whole workflow: ``gen-data`` synthesizes phantom
datasets, ``train-independent`` / ``pretrain-universal`` / ``distill`` /
``adapt`` run the four training stages, ``evaluate`` scores a checkpoint (or
the zero-filled baseline) on a split, ``count-params`` prints parameter
accounting, and ``report`` aggregates evaluation manifests into one
comparison table.

Config precedence is CLI flag > ``--config`` JSON file > documented default;
the resolved config is echoed into every run manifest.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import io_store, phantom, pipeline
from .model import CascadeNet, count_parameters

logger = logging.getLogger(__name__)

_LABEL_ORDER = {"Undersampled": 0, "Independent": 1, "Shared": 2, "Proposed": 3, "w/o MD": 4}

_CONFIG_FLAGS = (
    ("--epochs", int),
    ("--batch-size", int),
    ("--learning-rate", float),
    ("--weight-decay", float),
    ("--omega", float),
    ("--center-fraction", float),
    ("--distill-layer", int),
    ("--seed", int),
)


def _add_config_flags(parser):
    parser.add_argument("--config", type=Path, help="JSON file of training-config fields")
    for flag, typ in _CONFIG_FLAGS:
        parser.add_argument(flag, type=typ, default=None)
    parser.add_argument("--accel", type=float, action="append", default=None,
                        help="acceleration rate; repeat for a list (default 4)")
    parser.add_argument("--dc-mode", default=None, help="'hard' or a positive lambda")


def _resolve_config(args, stage):
    fields = {}
    if args.config is not None:
        fields.update(json.loads(Path(args.config).read_text()))
    for flag, _ in _CONFIG_FLAGS:
        name = flag.lstrip("-").replace("-", "_")
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    if args.accel is not None:
        fields["accels"] = args.accel
    if args.dc_mode is not None:
        try:
            fields["dc_mode"] = float(args.dc_mode)
        except ValueError:
            fields["dc_mode"] = args.dc_mode
    fields.pop("stage", None)
    return pipeline.TrainConfig(stage=stage, **fields)


def _resolve_checkpoint(path):
    """Accept either a run directory (containing run.json) or a checkpoint directory."""
    path = Path(path)
    if (path / io_store.RUN_MANIFEST).is_file():
        manifest = io_store.read_run_manifest(path / io_store.RUN_MANIFEST)
        return path / manifest["checkpoints"]["best"], manifest
    if (path / io_store.CHECKPOINT_MANIFEST).is_file():
        return path, None
    raise FileNotFoundError(f"{path}: neither a run directory nor a checkpoint directory")


def _load_profile(args):
    if args.anatomy_profile is not None:
        raw = json.loads(Path(args.anatomy_profile).read_text())
        raw["ellipse_count_range"] = tuple(raw["ellipse_count_range"])
        profile = phantom.AnatomyProfile(**raw)
    else:
        presets = phantom.example_profiles()
        if args.preset not in presets:
            raise ValueError(f"unknown preset {args.preset!r}; have {sorted(presets)}")
        profile = presets[args.preset]
    if args.count is not None:
        profile = dataclasses.replace(profile, dataset_size=args.count)
    return profile


def _cmd_gen_data(args):
    profile = _load_profile(args)
    images = phantom.generate_dataset(profile, args.size, args.seed)
    dataset = phantom.PhantomDataset(profile=profile, images=images, seed=args.seed)
    phantom.save_dataset(dataset, args.out)
    print(args.out)
    return 0


def _cmd_train_independent(args):
    config = _resolve_config(args, "S1")
    dataset = phantom.load_dataset(args.data[0])
    out = pipeline.train_independent(dataset, config, args.out)
    print(out)
    return 0


def _cmd_pretrain_universal(args):
    config = _resolve_config(args, "S2")
    datasets = [phantom.load_dataset(d) for d in args.data]
    init = _resolve_checkpoint(args.init)[0] if args.init else None
    out = pipeline.pretrain_universal(
        datasets, config, args.out, aspin=not args.no_aspin, init_checkpoint=init
    )
    print(out)
    return 0


def _teacher_map(specs):
    teachers = {}
    for spec in specs:
        if "=" in spec:
            name, path = spec.split("=", 1)
        else:
            path = spec
            ckpt, manifest = _resolve_checkpoint(path)
            if manifest is None or len(manifest.get("datasets", {})) != 1:
                raise ValueError(
                    f"cannot infer the anatomy of teacher {path}; pass it as NAME={path}"
                )
            teachers[next(iter(manifest["datasets"]))] = ckpt
            continue
        teachers[name] = _resolve_checkpoint(path)[0]
    return teachers


def _cmd_distill(args):
    config = _resolve_config(args, "S3")
    datasets = [phantom.load_dataset(d) for d in args.data]
    student = _resolve_checkpoint(args.student)[0]
    teachers = _teacher_map(args.teacher)
    out = pipeline.distill_universal(student, teachers, datasets, config, args.out)
    print(out)
    return 0


def _cmd_adapt(args):
    config = _resolve_config(args, "S4")
    dataset = phantom.load_dataset(args.data[0])
    base = _resolve_checkpoint(args.base)[0]
    out = pipeline.adapt_new_anatomy(base, dataset, config, args.out)
    print(out)
    return 0


def _cmd_evaluate(args):
    dataset = phantom.load_dataset(args.data[0])
    ckpt = None if args.zero_filled else _resolve_checkpoint(args.ckpt)[0]
    try:
        data_range = float(args.data_range)
    except ValueError:
        data_range = args.data_range
    result = pipeline.evaluate(
        ckpt, dataset, args.accel,
        center_fraction=args.center_fraction if args.center_fraction is not None else 0.04,
        split=args.split, data_range=data_range, out=args.out,
    )
    mean = result["mean"]
    print(
        f"{result['row_label']}  {result['anatomy']}  {result['accel']:g}x  "
        f"PSNR {mean['psnr_db']:.2f} dB  SSIM {mean['ssim_pct']:.2f}%  MAE {mean['mae']:.5f}"
    )
    return 0


def _cmd_count_params(args):
    if args.arch != "d5c5":
        raise ValueError(f"unknown architecture {args.arch!r}")
    model = CascadeNet(use_aspin=args.anatomies is not None, seed=0)
    base = count_parameters(model, "base")
    if args.anatomies is None:
        print(base)
        return 0
    per = count_parameters(model, "per_anatomy")
    total = base + args.anatomies * per
    print(f"base: {base}")
    print(f"per-anatomy: {per}")
    print(f"anatomies: {args.anatomies}")
    print(f"total: {total}")
    return 0


def _gather_eval_manifests(paths):
    found = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found.extend(sorted(p.rglob("eval*.json")))
        else:
            found.append(p)
    manifests = []
    for f in found:
        manifest = io_store.read_run_manifest(f)
        if manifest.get("kind") == "eval":
            manifests.append(manifest)
    if not manifests:
        raise ValueError("no evaluation manifests found")
    return manifests


def _cmd_report(args):
    manifests = _gather_eval_manifests(args.inputs)
    rows = []
    for m in manifests:
        rows.append({
            "model": m["row_label"],
            "anatomy": m["anatomy"],
            "accel": float(m["accel"]),
            "PSNR(dB)": float(m["mean"]["psnr_db"]),
            "SSIM(%)": float(m["mean"]["ssim_pct"]),
            "params": int(m["params"]),
        })
    rows.sort(key=lambda r: (r["accel"], _LABEL_ORDER.get(r["model"], 99), r["anatomy"]))

    header = ["model", "anatomy", "accel", "PSNR(dB)", "SSIM(%)", "params"]
    formatted = [
        [
            r["model"], r["anatomy"], f"{r['accel']:g}",
            f"{r['PSNR(dB)']:.2f}", f"{r['SSIM(%)']:.2f}", str(r["params"]),
        ]
        for r in rows
    ]
    widths = [max(len(h), *(len(row[i]) for row in formatted)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines += ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in formatted]
    table = "\n".join(lines)
    print(table)

    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".txt").write_text(table + "\n")
        with out.with_suffix(".csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=header)
            writer.writeheader()
            for r in rows:
                writer.writerow(r)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="urecon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--anatomy-profile", type=Path, help="JSON profile file")
    p.add_argument("--preset", default="ovoid", help="built-in profile name")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=None, help="override the profile's dataset size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_gen_data)

    for name, fn, n_data in (
        ("train-independent", _cmd_train_independent, 1),
        ("pretrain-universal", _cmd_pretrain_universal, "+"),
        ("distill", _cmd_distill, "+"),
        ("adapt", _cmd_adapt, 1),
    ):
        p = sub.add_parser(name, help=f"run the {name.replace('-', ' ')} stage")
        p.add_argument("--data", type=Path, nargs=n_data if n_data == "+" else None,
                       action="append" if n_data == 1 else None, required=True)
        p.add_argument("--out", type=Path, required=True)
        _add_config_flags(p)
        if name == "pretrain-universal":
            p.add_argument("--no-aspin", action="store_true",
                           help="train the shared baseline without per-anatomy normalization")
            p.add_argument("--init", type=Path, help="continue from this run/checkpoint")
        if name == "distill":
            p.add_argument("--student", type=Path, required=True)
            p.add_argument("--teacher", action="append", required=True,
                           help="teacher run dir, or NAME=path; repeatable")
        if name == "adapt":
            p.add_argument("--base", type=Path, required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="score a checkpoint or the zero-filled baseline")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--zero-filled", action="store_true")
    p.add_argument("--data", type=Path, action="append", required=True)
    p.add_argument("--accel", type=float, default=4.0)
    p.add_argument("--center-fraction", type=float, default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--data-range", default="image")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("count-params", help="parameter accounting for an architecture")
    p.add_argument("--arch", default="d5c5")
    p.add_argument("--anatomies", type=int, default=None)
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("report", help="aggregate evaluation manifests into a comparison table")
    p.add_argument("inputs", nargs="+", help="eval manifest files or directories to scan")
    p.add_argument("--out", type=Path, help="output path prefix (.txt and .csv)")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and not args.zero_filled and args.ckpt is None:
        parser.error("evaluate needs --ckpt or --zero-filled")
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, fail the command
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
