"""Downstream adaptation of a pre-trained checkpoint.

Dynamic finetuning attaches a fresh task (zero routing logits) and re-runs
the relaxed routing exploration, decaying the temperature from 5.0 to 0.01
over the first half of the steps. Fixed-path finetuning copies the selected
units into a static single-unit-per-layer backbone and trains that plainly.
Both run as single-worker training, so every engine invariant applies, and
neither mutates the loaded checkpoint's model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

from .checkpoint import CheckpointData, model_from_checkpoint
from .engine import SIMTConfig, Trainer
from .model import MultiTaskModel
from .network import Path, materialize_static
from .tasks import TaskSpec

FINETUNE_TAU_START = 5.0
FINETUNE_TAU_END = 0.01
FINETUNE_TAU_FRACTION = 0.5


@dataclass
class FinetuneResult:
    model: MultiTaskModel
    path: Optional[Path]
    records: List[dict]
    trainer: Trainer


def _single_worker_config(steps: int, base_lr: float, warmup_steps: int,
                          seed: int, routing: str) -> SIMTConfig:
    return SIMTConfig(
        num_workers=1,
        total_steps=max(steps, 1),
        warmup_steps=min(warmup_steps, steps),
        base_lr=base_lr,
        tau_start=FINETUNE_TAU_START,
        tau_end=FINETUNE_TAU_END,
        tau_decay_end_fraction=FINETUNE_TAU_FRACTION,
        routing=routing,
        execution="sequential",
        seed=seed,
    )


def dynamic_finetune(ckpt: CheckpointData, new_task: TaskSpec, steps: int,
                     base_lr: float = 0.02, warmup_steps: int = 0,
                     seed: int = 0, routing: str = "soft") -> FinetuneResult:
    """Explore a routing path for a new task while training the weights."""
    model = model_from_checkpoint(ckpt)
    if new_task.name in model.stems:
        raise ValueError(
            f"task name {new_task.name!r} collides with a pre-training task")
    model.add_task(new_task, seed)
    cfg = _single_worker_config(steps, base_lr, warmup_steps, seed, routing)
    trainer = Trainer(model, [new_task], cfg)
    records = trainer.run(steps=steps) if steps > 0 else []
    path = model.extract_path(new_task.name)
    return FinetuneResult(model, path, records, trainer)


def fixed_path_finetune(ckpt: CheckpointData, path: Path, new_task: TaskSpec,
                        steps: int, base_lr: float = 0.02, warmup_steps: int = 0,
                        seed: int = 0) -> FinetuneResult:
    """Train a static backbone materialized from a borrowed routing path."""
    donor = model_from_checkpoint(ckpt)
    static_backbone = materialize_static(donor.backbone, path)
    model = MultiTaskModel.from_backbone(static_backbone, [new_task], seed)
    cfg = _single_worker_config(steps, base_lr, warmup_steps, seed, "soft")
    trainer = Trainer(model, [new_task], cfg)
    records = trainer.run(steps=steps) if steps > 0 else []
    return FinetuneResult(model, None, records, trainer)
