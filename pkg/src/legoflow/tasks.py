"""Synthetic multi-task suites with heterogeneous shapes and domains.

Each task draws inputs from its own affine-shifted Gaussian and labels them
through a ground-truth linear map. Tasks within a group share the label map
but differ in domain shift; label maps of different groups are built on
orthogonal row spaces, so no single linear map fits two groups at once.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .seeding import rng_from, stable_tag

HEAD_KINDS = ("classifier", "regressor", "perpos")

DEFAULT_TRAIN_SIZE = 2048
DEFAULT_VAL_SIZE = 512


@dataclass
class DomainShift:
    """Input distribution x = offset + z @ transform.T with z standard normal."""

    offset: np.ndarray
    transform: np.ndarray

    def apply(self, z: np.ndarray) -> np.ndarray:
        return (self.offset + z @ self.transform.T).astype(np.float32)

    def mean(self) -> np.ndarray:
        return self.offset

    def cov(self) -> np.ndarray:
        return self.transform @ self.transform.T


class SyntheticDataset:
    """Deterministic labeled dataset; train and val splits never overlap."""

    def __init__(self, seed: int, input_dim: int, group: int,
                 label_map: np.ndarray, shift: DomainShift, noise_scale: float,
                 head_kind: str, head_shape: Tuple[int, ...],
                 train_size: int = DEFAULT_TRAIN_SIZE,
                 val_size: int = DEFAULT_VAL_SIZE):
        if head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head_kind!r}")
        self.seed = seed
        self.input_dim = input_dim
        self.group = group
        self.label_map = label_map
        self.shift = shift
        self.noise_scale = noise_scale
        self.head_kind = head_kind
        self.head_shape = head_shape
        self.train_size = train_size
        self.val_size = val_size

        rng = rng_from(seed, "dataset")
        total = train_size + val_size
        z = rng.standard_normal((total, input_dim))
        x = shift.apply(z)
        y = self._label(x, rng)
        self.x_train, self.x_val = x[:train_size], x[train_size:]
        self.y_train, self.y_val = y[:train_size], y[train_size:]

    def _label(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        scores = x.astype(np.float64) @ self.label_map.T
        if self.noise_scale > 0:
            scores = scores + self.noise_scale * rng.standard_normal(scores.shape)
        if self.head_kind == "regressor":
            return scores.astype(np.float32)
        if self.head_kind == "classifier":
            return scores.argmax(axis=1).astype(np.int64)
        seq_len, classes = self.head_shape
        return scores.reshape(-1, seq_len, classes).argmax(axis=2).astype(np.int64)

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.x_train, self.y_train
        if name == "val":
            return self.x_val, self.y_val
        raise ValueError(f"split must be 'train' or 'val', got {name!r}")


@dataclass
class TaskSpec:
    """One task: dataset, shape adapter dims, head, loss weighting, sampling."""

    name: str
    dataset: SyntheticDataset
    head_kind: str
    head_shape: Tuple[int, ...]
    loss_weight: float = 1.0
    sampling_weight: float = 1.0
    batch_size: int = 16

    def __post_init__(self):
        if self.loss_weight <= 0:
            raise ValueError("loss_weight must be positive")
        if self.sampling_weight <= 0:
            raise ValueError("sampling_weight must be positive")

    @property
    def input_dim(self) -> int:
        return self.dataset.input_dim

    @property
    def group(self) -> int:
        return self.dataset.group


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray


class BatchStream:
    """Epoch iterator over one split: shuffles, deals batches, reshuffles.

    Fully described by (rng state, permutation, cursor), so it can be
    cloned for tests and serialized for bitwise training resume.
    """

    def __init__(self, task: TaskSpec, split: str, rng: np.random.Generator):
        x, _ = task.dataset.split(split)
        if task.batch_size > len(x):
            raise ValueError(
                f"batch size {task.batch_size} exceeds split of {len(x)}")
        self.task = task
        self.split = split
        self.rng = rng
        self.perm = rng.permutation(len(x)).astype(np.int64)
        self.pos = 0

    def next_indices(self) -> np.ndarray:
        b = self.task.batch_size
        n = len(self.perm)
        if self.pos + b > n:
            self.perm = self.rng.permutation(n).astype(np.int64)
            self.pos = 0
        out = self.perm[self.pos:self.pos + b]
        self.pos += b
        return out

    def clone(self) -> "BatchStream":
        c = BatchStream.__new__(BatchStream)
        c.task = self.task
        c.split = self.split
        c.rng = np.random.default_rng()
        c.rng.bit_generator.state = self.rng.bit_generator.state
        c.perm = self.perm.copy()
        c.pos = self.pos
        return c

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(),
                "pos": self.pos}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.pos = int(state["pos"])


def next_batch(task: TaskSpec, split: str, stream: BatchStream) -> Batch:
    """Next deterministic batch of task.batch_size from the given stream."""
    x, y = task.dataset.split(split)
    idx = stream.next_indices()
    return Batch(x[idx], y[idx])


# ---------------------------------------------------------------------------
# suite constructors
# ---------------------------------------------------------------------------


def _orthogonal_group_maps(rng: np.random.Generator, num_groups: int,
                           target_dim: int, input_dim: int,
                           row_scale: float) -> List[np.ndarray]:
    if num_groups * target_dim > input_dim:
        raise ValueError(
            f"{num_groups} groups x {target_dim} targets exceed input dim {input_dim}")
    q, _ = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
    return [row_scale * q[g * target_dim:(g + 1) * target_dim].copy()
            for g in range(num_groups)]


def _mild_shift(rng: np.random.Generator, input_dim: int,
                offset_scale: float, scale_low: float, scale_high: float) -> DomainShift:
    offset = (offset_scale * rng.standard_normal(input_dim)).astype(np.float64)
    transform = np.diag(rng.uniform(scale_low, scale_high, size=input_dim))
    return DomainShift(offset, transform)


def make_conflict_suite(num_groups: int = 2, tasks_per_group: int = 2,
                        seed: int = 0, input_dim: int = 16, target_dim: int = 8,
                        noise_scale: float = 0.05, offset_scale: float = 0.5,
                        row_scale: float = 2.0, batch_size: int = 16,
                        group_offset_scale: float = 0.0,
                        group_scale_spread: float = 0.0) -> List[TaskSpec]:
    """Regression tasks in groups that share a label map and clash across groups.

    Tasks inside a group differ only in a mild domain shift. With
    group_offset_scale / group_scale_spread set, whole groups additionally
    live in shifted and rescaled input domains, so crowding the same units
    also contends their batch-norm statistics group against group.
    """
    if num_groups < 2:
        raise ValueError("conflict needs at least two groups")
    rng = rng_from(seed, "conflict-suite")
    maps = _orthogonal_group_maps(rng, num_groups, target_dim, input_dim, row_scale)
    group_offsets = [group_offset_scale * rng.standard_normal(input_dim)
                     for _ in range(num_groups)]
    if num_groups > 1 and group_scale_spread > 0:
        group_scales = np.linspace(1.0 - group_scale_spread / 2,
                                   1.0 + group_scale_spread / 2, num_groups)
    else:
        group_scales = np.ones(num_groups)
    tasks = []
    for g in range(num_groups):
        for j in range(tasks_per_group):
            name = f"g{g}t{j}"
            shift = _mild_shift(rng, input_dim, offset_scale, 0.95, 1.05)
            shift = DomainShift(group_offsets[g] + shift.offset,
                                float(group_scales[g]) * shift.transform)
            ds = SyntheticDataset(
                seed=int(rng.integers(2 ** 62)), input_dim=input_dim, group=g,
                label_map=maps[g], shift=shift, noise_scale=noise_scale,
                head_kind="regressor", head_shape=(target_dim,))
            tasks.append(TaskSpec(name, ds, "regressor", (target_dim,),
                                  batch_size=batch_size))
    return tasks


def make_related_task(suite: List[TaskSpec], group: int, seed: int,
                      name: str = "transfer") -> TaskSpec:
    """Fresh task reusing a group's label map under a new domain shift."""
    donors = [t for t in suite if t.group == group]
    if not donors:
        raise ValueError(f"no tasks of group {group} in the suite")
    donor = donors[0].dataset
    rng = rng_from(seed, "transfer-task", group)
    shift = _mild_shift(rng, donor.input_dim, 0.5, 0.9, 1.1)
    ds = SyntheticDataset(
        seed=int(rng.integers(2 ** 62)), input_dim=donor.input_dim, group=group,
        label_map=donor.label_map, shift=shift, noise_scale=donor.noise_scale,
        head_kind=donor.head_kind, head_shape=donor.head_shape)
    return TaskSpec(name, ds, donor.head_kind, donor.head_shape,
                    batch_size=donors[0].batch_size)


def make_shape_suite(seed: int = 0, offset_scale: float = 2.5) -> List[TaskSpec]:
    """Three tasks with pairwise different input dims, batch sizes and heads.

    Domain shifts are strong on purpose: this is the suite where local and
    synchronized BN statistics visibly diverge.
    """
    rng = rng_from(seed, "shape-suite")
    specs = [
        ("cls16", 16, "classifier", (5,), 8, 2.0),
        ("reg32", 32, "regressor", (8,), 12, 1.0),
        ("seq64", 64, "perpos", (4, 3), 6, 1.0),
    ]
    tasks = []
    for name, dim, kind, head_shape, batch, weight in specs:
        out_dim = int(np.prod(head_shape))
        label_map = rng.standard_normal((out_dim, dim)) / np.sqrt(dim)
        shift = _mild_shift(rng, dim, offset_scale, 0.5, 2.0)
        # unit second moment per output row keeps losses O(1) under big shifts
        second = shift.cov() + np.outer(shift.offset, shift.offset)
        norms = np.sqrt(np.einsum("ij,jk,ik->i", label_map, second, label_map))
        label_map = label_map / np.maximum(norms, 1e-9)[:, None]
        ds = SyntheticDataset(
            seed=int(rng.integers(2 ** 62)), input_dim=dim, group=0,
            label_map=label_map, shift=shift, noise_scale=0.05,
            head_kind=kind, head_shape=head_shape)
        tasks.append(TaskSpec(name, ds, kind, head_shape,
                              sampling_weight=weight, batch_size=batch))
    return tasks


def constant_predictor_loss(task: TaskSpec) -> float:
    """Val loss of the best input-independent predictor, the sanity floor."""
    _, y_train = task.dataset.split("train")
    _, y_val = task.dataset.split("val")
    if task.head_kind == "regressor":
        center = y_train.mean(axis=0)
        return float(np.mean((y_val - center) ** 2))
    flat_train = y_train.reshape(-1)
    flat_val = y_val.reshape(-1)
    classes = task.head_shape[-1]
    freq = np.bincount(flat_train, minlength=classes) / flat_train.size
    return float(-np.log(np.maximum(freq[flat_val], 1e-12)).mean())


def dump_suite_csv(tasks: List[TaskSpec], out_dir: str) -> List[str]:
    """One CSV per task with inputs and labels of both splits."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for task in tasks:
        path = os.path.join(out_dir, f"{task.name}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            d = task.input_dim
            y0 = task.dataset.split("train")[1][0]
            width = y0.size if hasattr(y0, "size") else 1
            writer.writerow(["split", "index"] + [f"x{i}" for i in range(d)]
                            + [f"y{i}" for i in range(width)])
            for split in ("train", "val"):
                x, y = task.dataset.split(split)
                for i in range(len(x)):
                    row = y[i].reshape(-1) if np.ndim(y[i]) else [y[i]]
                    writer.writerow([split, i] + list(x[i]) + list(row))
        written.append(path)
    return written
