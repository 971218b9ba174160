"""Training harness: the two-phase recipe (pretrain then fine-tune), step
schedules, ablation configs, checkpointing and step logs."""
from __future__ import annotations

import dataclasses
import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATION_FLAGS, ModelConfig, preset
from .data import DatasetManifest, iter_samples
from .losses import total_loss
from .model import SODAWideNetPP, build_model

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the path of the last good checkpoint."""

    def __init__(self, step: int, last_checkpoint):
        self.last_checkpoint = str(last_checkpoint) if last_checkpoint else None
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {self.last_checkpoint}"
        )


@dataclass(frozen=True)
class TrainPlan:
    phase: str
    epochs: int
    lr0: float
    lr_schedule: tuple[tuple[int, float], ...]  # (trigger epoch, multiplier)
    beta: float
    seed: int = 0
    batch_size: int = 8
    variant: str = "full"
    ablation: frozenset = frozenset()

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        unknown = set(self.ablation) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        object.__setattr__(self, "lr_schedule", tuple(tuple(x) for x in self.lr_schedule))
        object.__setattr__(self, "ablation", frozenset(self.ablation))

    @property
    def effective_beta(self) -> float:
        return 0.0 if "fg_only" in self.ablation else self.beta

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        d["ablation"] = sorted(self.ablation)
        return d


def pretrain_plan(**overrides) -> TrainPlan:
    """Pretraining preset: 21 epochs at lr 1e-3, halved after epoch 15, beta 1."""
    base = dict(phase="pretrain", epochs=21, lr0=1e-3,
                lr_schedule=((15, 0.5),), beta=1.0)
    base.update(overrides)
    return TrainPlan(**base)


def finetune_plan(**overrides) -> TrainPlan:
    """Fine-tuning preset: 11 epochs at lr 1e-3, cut to a tenth after epoch 5,
    beta 0.5."""
    base = dict(phase="finetune", epochs=11, lr0=1e-3,
                lr_schedule=((5, 0.1),), beta=0.5)
    base.update(overrides)
    return TrainPlan(**base)


def plan_for_phase(phase: str, **overrides) -> TrainPlan:
    if phase == "pretrain":
        return pretrain_plan(**overrides)
    if phase == "finetune":
        return finetune_plan(**overrides)
    raise ValueError(f"unknown phase {phase!r}")


def lr_at_epoch(plan: TrainPlan, epoch: int) -> float:
    """Learning rate during a 1-indexed epoch: lr0 times every multiplier whose
    trigger epoch has already passed (a multiplier "after N epochs" applies
    from epoch N + 1 onward)."""
    lr = plan.lr0
    for trigger, mult in plan.lr_schedule:
        if trigger < epoch:
            lr *= mult
    return lr


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


@dataclass
class RunRecord:
    plan: dict
    model_config: dict
    seed: int
    log_path: str
    checkpoints: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    steps: int = 0
    step0_loss: float = float("nan")
    final_loss: float = float("nan")

    def save(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2))


def _batched(indices: list[int], batch_size: int):
    for i in range(0, len(indices), batch_size):
        yield indices[i:i + batch_size]


def _to_tensors(samples):
    image = torch.from_numpy(np.stack([s.image for s in samples]))
    gt = torch.from_numpy(np.stack([s.gt for s in samples]))
    contour = torch.from_numpy(np.stack([s.contour for s in samples]))
    return image, gt, contour


def train(plan: TrainPlan, manifest: DatasetManifest, out_dir,
          resume=None, model_config: ModelConfig | None = None,
          image_size: tuple[int, int] | None = None,
          max_steps: int | None = None, step_callback=None) -> RunRecord:
    """Run the plan over the manifest, logging one loss-breakdown JSON line per
    step and writing a checkpoint after every epoch.

    `max_steps` caps the total number of steps (for smoke runs), and
    `step_callback(step, model, loss)` is invoked after each step; returning
    True from it stops the run early.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(plan.seed)

    config = model_config or preset(plan.variant)
    if resume is not None:
        model = load_checkpoint(resume, expected_config=config)
        if model.ablation != plan.ablation:
            raise ValueError(
                f"resume ablation mismatch: checkpoint {sorted(model.ablation)} "
                f"vs plan {sorted(plan.ablation)}"
            )
    else:
        model = build_model(config, ablation=plan.ablation, seed=plan.seed)
    model.train()

    optimizer = torch.optim.Adam(model.parameters(), lr=plan.lr0)
    size = image_size or config.input_size
    beta = plan.effective_beta
    expected_heads = model.head_ids

    log_path = out_dir / "steps.jsonl"
    record = RunRecord(
        plan=plan.to_dict(), model_config=config.to_dict(), seed=plan.seed,
        log_path=str(log_path),
    )
    (out_dir / "config.json").write_text(json.dumps(
        {"plan": plan.to_dict(), "model": config.to_dict()}, indent=2))

    rng = random.Random(plan.seed)
    last_checkpoint = None
    step = 0
    start = time.time()
    stop = False
    with log_path.open("w") as log_file:
        for epoch in range(1, plan.epochs + 1):
            lr = lr_at_epoch(plan, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = list(range(len(manifest.entries)))
            rng.shuffle(order)
            for batch_idx in _batched(order, plan.batch_size):
                samples = [s for s in iter_samples(manifest, size=size, order=batch_idx)]
                if not samples:
                    continue
                image, gt, contour = _to_tensors(samples)
                optimizer.zero_grad()
                outputs = model(image)
                breakdown = total_loss(outputs, gt, contour, beta,
                                       expected_heads=expected_heads)
                loss = breakdown.total
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step, last_checkpoint)
                loss.backward()
                optimizer.step()

                rec = breakdown.as_record()
                rec.update({"step": step, "epoch": epoch, "lr": lr})
                log_file.write(json.dumps(rec) + "\n")
                if step == 0:
                    record.step0_loss = float(loss.detach())
                record.final_loss = float(loss.detach())
                if step_callback is not None and step_callback(step, model, float(loss.detach())):
                    stop = True
                step += 1
                if stop or (max_steps is not None and step >= max_steps):
                    stop = True
                    break
            ckpt = out_dir / f"epoch_{epoch:03d}.npz"
            save_checkpoint(model, ckpt)
            last_checkpoint = ckpt
            record.checkpoints.append(str(ckpt))
            if stop:
                break

    record.steps = step
    record.wall_clock_s = time.time() - start
    record.save(out_dir / "run.json")
    return record
