"""Training loop, adaptive-moment optimizer, schedule, and checkpointing.

Parameters live on a Tape; the optimizer writes updated values back into the
leaf tensors in place, which is the one sanctioned mutation of tensor storage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import supervision_loss, supervision_weight, total_loss
from .data import AugmentConfig, CaseRecord, augment, normalize, random_crop
from .errors import ConfigError, InputError, ParseError, ShapeError, TrainingError
from .metrics import REGIONS, LabelVolume, MetricReport, evaluate_case
from .model import ModelConfig, SegmentationModel, probabilities_to_labels
from .tensor import Tape, Tensor, backward, load_array, save_array

CHECKPOINT_META = "meta.json"


@dataclass
class TrainConfig:
    """Loop hyperparameters; the learning rate drops by `lr_decay` after each
    milestone epoch."""

    epochs: int = 40
    batch_size: int = 2
    learning_rate: float = 1e-4
    lr_milestones: tuple = (20, 30, 36)
    lr_decay: float = 5.0
    weight_decay: float = 0.0
    l2_coefficient: float = 1e-5
    aux_weight: float = 0.5
    val_count: int = 0
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if any(m < 1 for m in self.lr_milestones):
            raise ConfigError(f"milestones must be positive epochs, got {self.lr_milestones}")
        if any(a >= b for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ConfigError(
                f"milestones must be strictly increasing, got {self.lr_milestones}"
            )
        if self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must exceed 1, got {self.lr_decay}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.l2_coefficient < 0:
            raise ConfigError(f"l2_coefficient must be non-negative, got {self.l2_coefficient}")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be non-negative, got {self.aux_weight}")
        if self.val_count < 0:
            raise ConfigError(f"val_count must be non-negative, got {self.val_count}")


def learning_rate_at(epoch: int, config: TrainConfig) -> float:
    """The rate in force during `epoch` (1-based): the base rate divided by
    lr_decay once per milestone already passed."""
    k = sum(1 for m in config.lr_milestones if epoch > m)
    return config.learning_rate / config.lr_decay**k


@dataclass
class OptimizerState:
    """First/second moment accumulators per parameter plus the step count."""

    m: dict
    v: dict
    step: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_optimizer(tape: Tape, learning_rate: float, weight_decay: float = 0.0) -> OptimizerState:
    m = {name: np.zeros(t.shape) for name, t in tape}
    v = {name: np.zeros(t.shape) for name, t in tape}
    return OptimizerState(m=m, v=v, learning_rate=learning_rate,
                          weight_decay=weight_decay)


def _assign(t: Tensor, values: np.ndarray) -> None:
    t.data.flags.writeable = True
    try:
        t.data[...] = values
    finally:
        t.data.flags.writeable = False


def optimizer_step(tape: Tape, grads: dict, state: OptimizerState) -> OptimizerState:
    """One bias-corrected moment update with decoupled weight decay, written
    back into the tape's leaves."""
    state.step += 1
    t = state.step
    for name, param in tape:
        g = grads.get(name)
        if g is None:
            raise TrainingError(f"parameter {name!r} received no gradient")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != param.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter has {param.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new = (param.data
               - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
               - state.learning_rate * state.weight_decay * param.data)
        if not np.all(np.isfinite(new)):
            raise TrainingError(f"non-finite update for parameter {name!r}")
        _assign(param, new)
    return state


# ----- checkpoints -------------------------------------------------------


def save_checkpoint(path, tape: Tape, state: OptimizerState | None = None,
                    epoch: int = 0, metrics: dict | None = None) -> Path:
    d = Path(path)
    (d / "params").mkdir(parents=True, exist_ok=True)
    names = sorted(name for name, _ in tape)
    for name, t in tape:
        save_array(d / "params" / f"{name}.bin", t.numpy(), name=name)
    meta = {
        "epoch": int(epoch),
        "metrics": metrics or {},
        "parameters": names,
        "optimizer": None,
    }
    if state is not None:
        (d / "optim").mkdir(exist_ok=True)
        for name, _ in tape:
            save_array(d / "optim" / f"{name}.m.bin", state.m[name], name=f"{name}.m")
            save_array(d / "optim" / f"{name}.v.bin", state.v[name], name=f"{name}.v")
        meta["optimizer"] = {
            "step": state.step,
            "learning_rate": state.learning_rate,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "weight_decay": state.weight_decay,
        }
    (d / CHECKPOINT_META).write_text(json.dumps(meta, indent=2) + "\n")
    return d


def load_checkpoint(path, tape: Tape) -> tuple[dict, OptimizerState | None]:
    """Restore leaf values (and optimizer state when present) into `tape`.

    The checkpoint's parameter set must match the tape's exactly.
    """
    d = Path(path)
    mpath = d / CHECKPOINT_META
    if not mpath.is_file():
        raise ParseError(f"{mpath}: missing checkpoint metadata")
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{mpath}: invalid JSON ({e})") from e
    stored = set(meta.get("parameters", []))
    here = {name for name, _ in tape}
    if stored != here:
        missing = sorted(here - stored)
        extra = sorted(stored - here)
        raise ParseError(
            f"{d}: parameter sets differ (missing {missing}, unexpected {extra})"
        )
    for name, t in tape:
        arr, _ = load_array(d / "params" / f"{name}.bin")
        if arr.shape != t.shape:
            raise ParseError(
                f"{d}: parameter {name!r} has shape {arr.shape}, expected {t.shape}"
            )
        _assign(t, arr)
    state = None
    if meta.get("optimizer") is not None:
        opt = meta["optimizer"]
        m, v = {}, {}
        for name, t in tape:
            m[name], _ = load_array(d / "optim" / f"{name}.m.bin")
            v[name], _ = load_array(d / "optim" / f"{name}.v.bin")
            if m[name].shape != t.shape or v[name].shape != t.shape:
                raise ParseError(f"{d}: optimizer moments for {name!r} have wrong shape")
        state = OptimizerState(m=m, v=v, step=int(opt["step"]),
                               learning_rate=float(opt["learning_rate"]),
                               beta1=float(opt["beta1"]), beta2=float(opt["beta2"]),
                               eps=float(opt["eps"]),
                               weight_decay=float(opt["weight_decay"]))
    return meta, state


# ----- inference ---------------------------------------------------------


@dataclass
class InferenceResult:
    labels: LabelVolume
    probabilities: np.ndarray
    reports: list


def infer(model: SegmentationModel, case: CaseRecord) -> InferenceResult:
    """Normalize, run the model, and decode the class map to raw labels."""
    if case.extents != model.config.volume_extents:
        raise ShapeError(
            f"case {case.case_id!r} has extents {case.extents}, model was built "
            f"for {model.config.volume_extents}"
        )
    prepared = normalize(case)
    out = model.forward(Tensor(prepared.modality_stack()[None]))
    probs = out.probabilities.numpy()[0]
    labels = probabilities_to_labels(probs, case.spacing)
    return InferenceResult(labels=labels, probabilities=probs, reports=out.reports)


# ----- training loop -----------------------------------------------------


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_dice: dict
    checkpoint_dir: Path | None
    model: SegmentationModel
    optimizer: OptimizerState


def _case_loss(model: SegmentationModel, case: CaseRecord, delta: float,
               l2_coefficient: float):
    x = Tensor(case.modality_stack()[None])
    out = model.forward(x)
    main = supervision_loss(out.probabilities, case.labels)
    aux = [(stage, supervision_loss(p, case.labels))
           for stage, p in sorted(out.aux_probabilities.items())]
    params = (t for _, t in model.tape)
    return total_loss(main, aux, [delta] * len(aux), params, l2_coefficient)


def _validate(model: SegmentationModel, cases: list) -> dict:
    report = MetricReport(rows=[])
    for case in cases:
        result = infer(model, case)
        report.extend(evaluate_case(result.labels, case.labels, case.case_id))
    return report.mean_dice()


def train(train_cases: list, val_cases: list, model_config: ModelConfig,
          config: TrainConfig, augment_config: AugmentConfig | None = None,
          out_dir=None) -> TrainResult:
    """Full training run; returns the epoch log and the best-Dice model.

    Per case: normalize, augment, crop to the model extents, forward, total
    loss, backward; gradients average over the batch before each optimizer
    step.  Validation Dice is computed every epoch and the best mean-Dice
    checkpoint is kept when an output directory is given.
    """
    if not train_cases:
        raise InputError("training set is empty")
    augment_config = AugmentConfig() if augment_config is None else augment_config
    crop = augment_config.crop_size or model_config.volume_extents
    if tuple(crop) != model_config.volume_extents:
        raise ConfigError(
            f"crop size {tuple(crop)} must match the model extents "
            f"{model_config.volume_extents}"
        )
    for case in list(train_cases) + list(val_cases):
        if case.labels is None:
            raise InputError(f"case {case.case_id!r} has no labels")
        if any(e < c for e, c in zip(case.extents, crop)):
            raise ConfigError(
                f"case {case.case_id!r} extents {case.extents} are smaller than "
                f"the crop {tuple(crop)}"
            )

    tape = Tape()
    model = SegmentationModel.create(model_config, np.random.default_rng((config.seed, 0)), tape)
    state = init_optimizer(tape, config.learning_rate, config.weight_decay)

    out_path = None
    log_file = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = out_path / "log.jsonl"
        log_file.write_text("")

    log = []
    best = {"epoch": 0, "mean": -1.0, "dice": {r: 0.0 for r in REGIONS}}
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate_at(epoch, config)
        state.learning_rate = lr
        delta = supervision_weight(epoch - 1, config.epochs, config.aux_weight)
        order = list(range(len(train_cases)))
        np.random.default_rng((config.seed, epoch, 1)).shuffle(order)

        totals, mains, aux_sums = [], [], {}
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            accum = {name: np.zeros(t.shape) for name, t in tape}
            for idx in chunk:
                rng_case = np.random.default_rng((config.seed, epoch, 2, idx))
                case = normalize(train_cases[idx])
                case = augment(case, augment_config, rng_case)
                case = random_crop(case, crop, rng_case)
                report = _case_loss(model, case, delta, config.l2_coefficient)
                grads = backward(tape, report.total)
                for name in accum:
                    g = grads[name]
                    if g is None:
                        raise TrainingError(f"parameter {name!r} received no gradient")
                    accum[name] += g / len(chunk)
                totals.append(report.total.item())
                mains.append(report.main.item())
                for stage, _, loss in report.auxiliary:
                    aux_sums.setdefault(stage, []).append(loss.item())
            optimizer_step(tape, accum, state)

        record = {
            "epoch": epoch,
            "lr": lr,
            "total_loss": float(np.mean(totals)),
            "main_loss": float(np.mean(mains)),
            "aux_losses": [
                {"stage": stage, "weight": delta, "loss": float(np.mean(vals))}
                for stage, vals in sorted(aux_sums.items())
            ],
            "val_dice": None,
        }
        if val_cases:
            dice = _validate(model, val_cases)
            record["val_dice"] = dice
            mean = float(np.mean([dice[r] for r in REGIONS]))
            if mean > best["mean"]:
                best = {"epoch": epoch, "mean": mean, "dice": dice}
                if out_path is not None:
                    save_checkpoint(out_path / "checkpoint", tape, state, epoch,
                                    {"val_dice": dice})
        log.append(record)
        if log_file is not None:
            with log_file.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    if not val_cases and out_path is not None:
        save_checkpoint(out_path / "checkpoint", tape, state, config.epochs, {})
    checkpoint_dir = (out_path / "checkpoint") if out_path is not None else None
    return TrainResult(log=log, best_epoch=best["epoch"], best_dice=best["dice"],
                       checkpoint_dir=checkpoint_dir, model=model, optimizer=state)
