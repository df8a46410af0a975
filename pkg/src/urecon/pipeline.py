"""Staged training pipeline: independent models, universal pretraining with
round-robin anatomy batches, distillation fine-tuning, and frozen-base
adaptation to new anatomies.

Stages (checkpoint tags):

* S1 — one model per anatomy, mean-absolute-error loss.
* S2 — universal model over all anatomies; every iteration draws a
  single-anatomy batch in round-robin order, so shared weights see every
  anatomy while only that batch's affine set updates.
* S3 — continues the S2 model with loss = MAE + omega * attention-transfer
  against the frozen per-anatomy teachers.
* S4 — registers a new anatomy and trains only its affine set (1,280
  parameters for the default plan); everything else stays bit-identical.

Every run is a pure function of (data, config, seed): shuffles, sampling
masks, and weight init all derive from explicit seeds, and per-epoch metric
rows plus the best-validation checkpoint land in a run directory.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io_store, phantom
from .distill import total_at_loss
from .kspace import make_gaussian_mask, undersample, zero_filled
from .metrics import mae, psnr, ssim
from .model import CascadeNet, count_parameters

logger = logging.getLogger(__name__)

ROW_LABELS = {
    None: "Undersampled",
    "independent": "Independent",
    "shared": "Shared",
    "universal": "w/o MD",
    "universal-distilled": "Proposed",
}


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 1e-7
    omega: float = 1e-4
    accels: tuple = (4.0,)
    center_fraction: float = 0.04
    dc_mode: object = "hard"
    distill_layer: int = 3
    seed: int = 0
    num_cascades: int = 5
    layers_per_block: int = 5
    features: int = 32
    data_range: object = "image"
    freeze_base: bool = True

    def __post_init__(self):
        if self.stage not in io_store.STAGES:
            raise ValueError(f"stage must be one of {io_store.STAGES}, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.omega < 0:
            raise ValueError("learning_rate must be positive; weight_decay and omega non-negative")
        self.accels = tuple(float(a) for a in (self.accels if hasattr(self.accels, "__iter__") else (self.accels,)))
        if not self.accels or any(a <= 1.0 for a in self.accels):
            raise ValueError("accels must be a non-empty list of values > 1")
        if not 1 <= self.distill_layer <= self.layers_per_block:
            raise ValueError(f"distill_layer must lie in [1, {self.layers_per_block}]")

    def asdict(self):
        d = dataclasses.asdict(self)
        d["accels"] = list(self.accels)
        return d


def stable_seed(*parts):
    """Collapse a mixed key (ints, names, floats) into one reproducible uint64 seed."""
    entropy = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            entropy.append(int(p) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(p).encode()))
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def round_robin_schedule(num_anatomies, num_iterations):
    """Anatomy index per iteration; any window of A iterations covers all A once."""
    if num_anatomies < 1:
        raise ValueError("need at least one anatomy")
    return [i % num_anatomies for i in range(num_iterations)]


def dataset_split(dataset):
    """The fixed train/val/test split of a dataset, derived from its own seed."""
    return phantom.split_dataset(
        len(dataset.images),
        stable_seed(dataset.seed, "split", dataset.profile.anatomy_id),
    )


def metric_row(pred, gt, data_range="image"):
    """PSNR/SSIM/MAE of one 2-channel prediction against a 2-channel ground truth.

    Metrics compare the prediction's magnitude to the ground-truth real
    channel.  ``data_range`` is the ground-truth max - min per image, or a
    fixed number.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    magnitude = np.hypot(pred[0], pred[1])
    reference = gt[0]
    if data_range == "image":
        dr = float(reference.max() - reference.min())
    else:
        dr = float(data_range)
    if dr <= 0:
        raise ValueError("data_range must be positive (constant image needs a fixed range)")
    return {
        "psnr_db": psnr(magnitude, reference, dr),
        "ssim": ssim(magnitude, reference, dr),
        "mae": mae(magnitude, reference),
    }


def _eval_masks(dataset, indices, accel, center_fraction, tag):
    h, w = dataset.images.shape[-2:]
    return [
        make_gaussian_mask(
            h, w, accel, center_fraction,
            seed=stable_seed(dataset.seed, "mask", tag, accel, int(i)),
        )
        for i in indices
    ]


def _eval_rows(model, dataset, indices, accel, center_fraction, anatomy, data_range, tag, batch_size=8):
    """Per-image metric rows for one split, deterministic masks per image."""
    rows = []
    indices = list(indices)
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        masks = _eval_masks(dataset, chunk, accel, center_fraction, tag)
        m = torch.from_numpy(np.stack([mk.mask for mk in masks]))
        gt = torch.from_numpy(dataset.images[chunk])
        y = undersample(gt, m)
        x_u = zero_filled(y)
        if model is None:
            pred = x_u
        else:
            with torch.no_grad():
                pred = model(x_u, y, m, anatomy=anatomy)
        for j, i in enumerate(chunk):
            row = metric_row(pred[j].numpy(), dataset.images[i], data_range)
            row["index"] = int(i)
            rows.append(row)
    return rows


def _mean_metrics(rows):
    return {
        "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "ssim_pct": float(100.0 * np.mean([r["ssim"] for r in rows])),
        "mae": float(np.mean([r["mae"] for r in rows])),
    }


def _ordered_datasets(datasets):
    ordered = sorted(datasets, key=lambda d: d.profile.anatomy_id)
    names = [d.name for d in ordered]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate anatomy names: {names}")
    return {d.name: d for d in ordered}


def _expect_stage(config, stage):
    if config.stage != stage:
        raise ValueError(f"config.stage is {config.stage!r}, this operation runs stage {stage!r}")


def _clone_state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _epoch_batches(train_indices, batch_size, num_batches, rng):
    """Shuffled single-anatomy batches, cycling when the stream is shorter."""
    order = rng.permutation(np.asarray(train_indices))
    reps = math.ceil(num_batches * batch_size / len(order))
    seq = np.tile(order, reps)[: num_batches * batch_size]
    return seq.reshape(num_batches, batch_size)


def _train_accel(config, epoch, name, index):
    if len(config.accels) == 1:
        return config.accels[0]
    rng = np.random.default_rng(stable_seed(config.seed, "accel", epoch, name, index))
    return config.accels[int(rng.integers(len(config.accels)))]


def _run_training(
    model,
    datasets,
    config,
    out_dir,
    *,
    stage,
    variant,
    teachers=None,
    trainable_params=None,
    init_checkpoint=None,
    teacher_paths=None,
):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(stable_seed(config.seed, "torch", stage))

    names = list(datasets)
    splits = {n: dataset_split(datasets[n]) for n in names}
    images = {n: torch.from_numpy(datasets[n].images) for n in names}
    has_bank = model.anatomy_norm is not None
    h, w = next(iter(datasets.values())).images.shape[-2:]

    if trainable_params is None:
        trainable_params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        trainable_params, lr=config.learning_rate, weight_decay=config.weight_decay
    )

    batches_per_anatomy = max(
        math.ceil(len(splits[n].train) / config.batch_size) for n in names
    )
    iters_per_epoch = len(names) * batches_per_anatomy
    schedule = round_robin_schedule(len(names), iters_per_epoch)

    rows = []
    train_loss = []

    def validate(epoch):
        per_anatomy_mae = []
        for n in names:
            val = _eval_rows(
                model, datasets[n], splits[n].val, config.accels[0],
                config.center_fraction, n if has_bank else None,
                config.data_range, "val",
            )
            mean = _mean_metrics(val)
            rows.append({
                "epoch": epoch,
                "anatomy": n,
                "anatomy_id": datasets[n].profile.anatomy_id,
                "split": "val",
                **mean,
            })
            per_anatomy_mae.append(mean["mae"])
        return float(np.mean(per_anatomy_mae))

    best_mae = validate(0)
    best_epoch = 0
    best_state = _clone_state(model)

    for epoch in range(1, config.epochs + 1):
        streams = {
            n: _epoch_batches(
                splits[n].train, config.batch_size, batches_per_anatomy,
                np.random.default_rng(stable_seed(config.seed, "order", epoch, n)),
            )
            for n in names
        }
        cursor = dict.fromkeys(names, 0)
        losses = []
        for it, a_idx in enumerate(schedule):
            name = names[a_idx]
            batch = streams[name][cursor[name]]
            cursor[name] += 1

            masks = [
                make_gaussian_mask(
                    h, w, _train_accel(config, epoch, name, int(i)),
                    config.center_fraction,
                    seed=stable_seed(config.seed, "train-mask", epoch, name, int(i)),
                )
                for i in batch
            ]
            m = torch.from_numpy(np.stack([mk.mask for mk in masks]))
            gt = images[name][batch]
            y = undersample(gt, m)
            x_u = zero_filled(y)

            optimizer.zero_grad()
            if teachers is not None:
                pred, student_traces = model(
                    x_u, y, m, anatomy=name,
                    collect_traces=True, trace_layer=config.distill_layer,
                )
            else:
                pred = model(x_u, y, m, anatomy=name if has_bank else None)
            loss = (pred[:, 0] - gt[:, 0]).abs().mean()
            if teachers is not None:
                with torch.no_grad():
                    _, teacher_traces = teachers[name](
                        x_u, y, m, anatomy=None,
                        collect_traces=True, trace_layer=config.distill_layer,
                    )
                loss = loss + config.omega * total_at_loss(
                    teacher_traces, student_traces, model.num_cascades
                )
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss in stage {stage} (epoch {epoch}, iteration {it}, "
                    f"anatomy {name}): training diverged"
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        train_loss.append(float(np.mean(losses)))
        val_mae = validate(epoch)
        logger.info(
            "[%s/%s] epoch %d/%d train_loss %.5f val_mae %.5f",
            stage, variant, epoch, config.epochs, train_loss[-1], val_mae,
        )
        if val_mae < best_mae:
            best_mae = val_mae
            best_epoch = epoch
            best_state = _clone_state(model)

    model.load_state_dict(best_state)
    io_store.save_checkpoint(model, stage, out_dir / "checkpoint", variant=variant)

    manifest = {
        "kind": "run",
        "stage": stage,
        "variant": variant,
        "seed": config.seed,
        "config": config.asdict(),
        "datasets": {
            n: {
                "n": len(datasets[n].images),
                "seed": datasets[n].seed,
                "anatomy_id": datasets[n].profile.anatomy_id,
                "image_size": int(datasets[n].images.shape[-1]),
            }
            for n in names
        },
        "splits": {
            n: {"train": list(splits[n].train), "val": list(splits[n].val), "test": list(splits[n].test)}
            for n in names
        },
        "schedule_anatomies": names,
        "iters_per_epoch": iters_per_epoch,
        "train_loss": train_loss,
        "metrics": rows,
        "best_epoch": best_epoch,
        "checkpoints": {"best": "checkpoint"},
        "numeric_mode": "cpu-deterministic",
    }
    if init_checkpoint is not None:
        manifest["init_checkpoint"] = str(init_checkpoint)
    if teacher_paths is not None:
        manifest["teachers"] = {k: str(v) for k, v in teacher_paths.items()}
    io_store.write_run_manifest(out_dir / io_store.RUN_MANIFEST, manifest)
    return out_dir


def _build_model(config, use_aspin, anatomies, init_seed_parts):
    return CascadeNet(
        num_cascades=config.num_cascades,
        layers_per_block=config.layers_per_block,
        features=config.features,
        use_aspin=use_aspin,
        anatomies=anatomies,
        dc_mode=config.dc_mode,
        seed=stable_seed(config.seed, "init", *init_seed_parts),
    )


def train_independent(dataset, config, out_dir):
    """Stage S1: one model for one anatomy, MAE loss, best-validation checkpoint."""
    _expect_stage(config, "S1")
    model = _build_model(config, use_aspin=False, anatomies=(), init_seed_parts=("independent", dataset.name))
    return _run_training(
        model, {dataset.name: dataset}, config, out_dir,
        stage="S1", variant="independent",
    )


def pretrain_universal(datasets, config, out_dir, aspin=True, init_checkpoint=None):
    """Stage S2: multi-anatomy pretraining with round-robin single-anatomy batches.

    With ``aspin=False`` the model has no per-anatomy normalization: that is
    the "shared" baseline, trained on exactly the same batch schedule.  An
    ``init_checkpoint`` continues training from stored weights (fresh
    optimizer), which is also how an S2 run is extended.
    """
    _expect_stage(config, "S2")
    ordered = _ordered_datasets(datasets)
    if len(ordered) < 2:
        raise ValueError("universal pretraining needs at least two anatomies")
    if init_checkpoint is not None:
        model = io_store.load_checkpoint(init_checkpoint)
        if model.anatomy_norm is not None:
            for name in ordered:
                model.anatomy_norm.resolve(name)
    else:
        names = list(ordered)
        model = _build_model(
            config,
            use_aspin=aspin,
            anatomies=names if aspin else (),
            init_seed_parts=("universal" if aspin else "shared",),
        )
    variant = "universal" if model.anatomy_norm is not None else "shared"
    return _run_training(
        model, ordered, config, out_dir,
        stage="S2", variant=variant, init_checkpoint=init_checkpoint,
    )


def distill_universal(student_checkpoint, teacher_checkpoints, datasets, config, out_dir):
    """Stage S3: continue the universal model with MAE + omega * attention transfer.

    ``teacher_checkpoints`` maps anatomy name to an S1 checkpoint (or loaded
    model); the teacher for each batch is that anatomy's model, frozen.  Every
    anatomy being trained must have a teacher.
    """
    _expect_stage(config, "S3")
    ordered = _ordered_datasets(datasets)
    model = io_store.load_checkpoint(student_checkpoint)
    if model.anatomy_norm is None:
        raise ValueError("student checkpoint has no anatomy norm bank; distillation needs the universal model")
    teacher_paths = {}
    teachers = {}
    for name in ordered:
        model.anatomy_norm.resolve(name)
        if name not in teacher_checkpoints:
            raise ValueError(f"missing teacher for anatomy {name!r}")
        teacher = teacher_checkpoints[name]
        if not isinstance(teacher, CascadeNet):
            teacher_paths[name] = teacher
            teacher = io_store.load_checkpoint(teacher)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        teachers[name] = teacher
    return _run_training(
        model, ordered, config, out_dir,
        stage="S3", variant="universal-distilled",
        teachers=teachers if config.omega > 0 else None,
        init_checkpoint=student_checkpoint,
        teacher_paths=teacher_paths or None,
    )


def adapt_new_anatomy(base_checkpoint, new_dataset, config, out_dir):
    """Stage S4: register a new anatomy and train only its affine set.

    All pre-existing parameters are frozen structurally (excluded from the
    optimizer and from gradient computation), so old-anatomy behavior is
    bit-identical before and after.
    """
    _expect_stage(config, "S4")
    if not config.freeze_base:
        raise ValueError("stage S4 trains only the new affine set; freeze_base must remain True")
    model = io_store.load_checkpoint(base_checkpoint)
    if model.anatomy_norm is None:
        raise ValueError("base checkpoint has no anatomy norm bank; cannot adapt")
    name = new_dataset.name
    model.add_anatomy(name)
    for p in model.parameters():
        p.requires_grad_(False)
    new_params = [model.anatomy_norm.gamma[name], model.anatomy_norm.beta[name]]
    for p in new_params:
        p.requires_grad_(True)
    variant = getattr(model, "variant", None) or "universal"
    return _run_training(
        model, {name: new_dataset}, config, out_dir,
        stage="S4", variant=variant,
        trainable_params=new_params, init_checkpoint=base_checkpoint,
    )


def evaluate(
    checkpoint,
    dataset,
    accel,
    center_fraction=0.04,
    split="test",
    anatomy="auto",
    data_range="image",
    out=None,
):
    """Metric table of a checkpoint (or the zero-filled baseline) on one split.

    ``checkpoint`` may be a checkpoint directory, a loaded model, or None for
    the zero-filled baseline.  Masks are drawn per image from the dataset
    seed, so every model is scored against identical measurements and re-runs
    are deterministic.
    """
    if checkpoint is None:
        model = None
        source = None
    elif isinstance(checkpoint, CascadeNet):
        model = checkpoint
        source = None
    else:
        model = io_store.load_checkpoint(checkpoint)
        source = str(checkpoint)

    indices = getattr(dataset_split(dataset), split)
    if not indices:
        raise ValueError(f"{split} split of {dataset.name} is empty")
    if anatomy == "auto":
        anatomy = dataset.name if (model is not None and model.anatomy_norm is not None) else None

    rows = _eval_rows(
        model, dataset, indices, float(accel), center_fraction,
        anatomy, data_range, split,
    )
    variant = getattr(model, "variant", None) if model is not None else None
    result = {
        "kind": "eval",
        "checkpoint": source,
        "stage": getattr(model, "stage", None) if model is not None else None,
        "variant": variant,
        "row_label": ROW_LABELS.get(variant, variant or "Undersampled"),
        "anatomy": dataset.name,
        "anatomy_id": dataset.profile.anatomy_id,
        "accel": float(accel),
        "center_fraction": float(center_fraction),
        "split": split,
        "data_range": data_range,
        "params": count_parameters(model, "total") if model is not None else 0,
        "n_images": len(indices),
        "rows": rows,
        "mean": _mean_metrics(rows),
    }
    if out is not None:
        io_store.write_run_manifest(out, result)
    return result
