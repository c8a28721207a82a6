"""Single-iteration-multiple-tasks training over virtual workers.

Every iteration, each worker samples one task and one batch, runs the
forward as a generator that pauses at each lego layer to exchange BN
statistics, then backprops its own loss. The coordinator reduces BN
statistics and fuses gradients in ascending worker order, so a thread-pool
run and the sequential oracle produce bit-identical parameters.

Barrier schedule: one BN reduction per lego layer, one fusion barrier per
iteration. All shared state (parameters, running statistics, metrics) is
mutated only by the coordinator between barriers.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .autodiff import NonFiniteError, ShapeError, sample_gumbel, sgd_step
from .model import MultiTaskModel, WorkerOutput, evaluate_task
from .seeding import rng_from
from .tasks import Batch, BatchStream, TaskSpec, next_batch

SAMPLING_MODES = ("simt", "per_batch")
EXECUTION_MODES = ("parallel", "sequential")


class TrainingDiverged(RuntimeError):
    """Raised when a worker produces a non-finite loss."""

    def __init__(self, worker: int, task: str, step: int):
        self.worker, self.task, self.step = worker, task, step
        super().__init__(
            f"non-finite loss at step {step} on worker {worker} (task {task!r})")


@dataclass
class SIMTConfig:
    num_workers: int = 4
    total_steps: int = 1000
    warmup_steps: int = 100
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    tau_start: float = 5.0
    tau_end: float = 0.01
    tau_decay_end_fraction: float = 0.9
    sampling_mode: str = "simt"
    sync_bn: bool = True
    routing: str = "soft"
    execution: str = "parallel"
    seed: int = 0

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("need at least one worker")
        if not 0 < self.tau_decay_end_fraction <= 1:
            raise ValueError("tau_decay_end_fraction must be in (0, 1]")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup longer than training")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode {self.sampling_mode!r}")
        if self.routing not in ("soft", "hard"):
            raise ValueError(f"routing {self.routing!r}")
        if self.execution not in EXECUTION_MODES:
            raise ValueError(f"execution {self.execution!r}")


def lr_schedule(step: int, cfg: SIMTConfig) -> float:
    """Linear warmup from zero, then cosine decay to zero at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def temperature_schedule(step: int, cfg: SIMTConfig) -> float:
    """Linear decay from tau_start to tau_end, then held constant."""
    decay_steps = cfg.tau_decay_end_fraction * cfg.total_steps
    if decay_steps <= 0 or step >= decay_steps:
        return cfg.tau_end
    frac = step / decay_steps
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac


def sample_task(weights: Sequence[float], rng: np.random.Generator) -> int:
    """One categorical draw proportional to the given positive weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty task set")
    if np.any(w <= 0):
        raise ValueError("sampling weights must be positive")
    cum = np.cumsum(w / w.sum())
    return min(int(np.searchsorted(cum, rng.random(), side="right")), w.size - 1)


def syncbn_reduce(locals_: Sequence[Tuple[int, np.ndarray, np.ndarray]]):
    """Merge per-worker (count, sum, sum_sq) into global (mean, var).

    Reduction runs in list order, which callers keep ascending by worker id.
    Variance is the population variance of the concatenated samples.
    """
    if not locals_:
        raise ValueError("syncbn_reduce needs at least one contribution")
    total = 0
    s = None
    sq = None
    for count, ls, lsq in locals_:
        if count < 1:
            raise ValueError("BN contribution with empty batch")
        total += count
        if s is None:
            s = np.asarray(ls, dtype=np.float64).copy()
            sq = np.asarray(lsq, dtype=np.float64).copy()
        else:
            s += ls
            sq += lsq
    mean = s / total
    var = np.maximum(sq / total - mean * mean, 0.0)
    return mean.astype(np.float32), var.astype(np.float32)


@dataclass
class FusionReport:
    """Task-averaged gradients plus, per parameter, who used it."""

    fused: Dict[str, np.ndarray]
    n_gpu: Dict[str, int]
    users: Dict[str, Tuple[int, ...]]

    def histogram(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for n in self.n_gpu.values():
            out[str(n)] = out.get(str(n), 0) + 1
        return out


def fuse_gradients(worker_grads: Sequence[Dict[str, np.ndarray]],
                   param_order: Optional[Sequence[str]] = None) -> FusionReport:
    """fused[p] = mean of g_i[p] over the workers that used p.

    The divisor is the user count, not the sample count, so workers with
    different batch sizes still contribute equally.
    """
    if param_order is None:
        seen = []
        for grads in worker_grads:
            for pid in grads:
                if pid not in seen:
                    seen.append(pid)
        param_order = seen
    fused: Dict[str, np.ndarray] = {}
    n_gpu: Dict[str, int] = {}
    users: Dict[str, Tuple[int, ...]] = {}
    for pid in param_order:
        contrib = [(i, grads[pid]) for i, grads in enumerate(worker_grads)
                   if pid in grads]
        if not contrib:
            continue
        shape = contrib[0][1].shape
        acc = np.zeros(shape, dtype=np.float64)
        for i, g in contrib:
            if g.shape != shape:
                raise ShapeError(f"worker {i} gradient shape {g.shape} for {pid}")
            acc += g
        fused[pid] = (acc / len(contrib)).astype(np.float32)
        n_gpu[pid] = len(contrib)
        users[pid] = tuple(i for i, _ in contrib)
    return FusionReport(fused, n_gpu, users)


# ---------------------------------------------------------------------------
# worker slots and the training loop
# ---------------------------------------------------------------------------


class WorkerSlot:
    """Per-worker persistent state: one batch stream per (worker, task)."""

    def __init__(self, worker_id: int, tasks: List[TaskSpec], seed: int):
        self.worker_id = worker_id
        self.streams = {
            task.name: BatchStream(task, "train", rng_from(seed, "data", worker_id, i))
            for i, task in enumerate(tasks)
        }

    def stream_states(self) -> Dict[str, dict]:
        return {name: s.state() for name, s in self.streams.items()}

    def restore_streams(self, states: Dict[str, dict]) -> None:
        for name, st in states.items():
            self.streams[name].restore(st)


@dataclass
class WorkerResult:
    worker_id: int
    task: str
    loss: float
    grads: Dict[str, np.ndarray]
    bn_means: Dict[Tuple[int, int], np.ndarray]


@dataclass
class IterationResult:
    step: int
    lr: float
    tau: float
    records: List[dict]
    fusion: FusionReport
    bn_spread: float


def _advance(gen, send_value, first: bool):
    try:
        item = next(gen) if first else gen.send(send_value)
        return ("yield", item)
    except StopIteration as stop:
        return ("done", stop.value)


class Trainer:
    """Drives the iteration protocol over one model and task list."""

    def __init__(self, model: MultiTaskModel, tasks: List[TaskSpec],
                 cfg: SIMTConfig):
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate task names")
        for t in tasks:
            if t.name not in model.stems:
                raise ValueError(f"model has no modules for task {t.name!r}")
        self.model = model
        self.tasks = tasks
        self.cfg = cfg
        self.step = 0
        self.params = model.params()
        self.param_ids = [p.id for p in self.params]
        self.slots = [WorkerSlot(i, tasks, cfg.seed) for i in range(cfg.num_workers)]
        self._pool: Optional[ThreadPoolExecutor] = None
        if cfg.execution == "parallel":
            cap = os.environ.get("LEGOFLOW_THREADS")
            threads = cfg.num_workers if not cap else max(1, min(int(cap), cfg.num_workers))
            if threads > 1:
                self._pool = ThreadPoolExecutor(max_workers=threads,
                                                thread_name_prefix="legoflow-worker")
        kernels.warmup()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    # -- per-step sampling, shared by training and the sampling simulator ----

    def sampled_tasks(self, step: int) -> List[int]:
        weights = [t.sampling_weight for t in self.tasks]
        if self.cfg.sampling_mode == "per_batch":
            shared = sample_task(weights, rng_from(self.cfg.seed, "shared-task", step))
            return [shared] * self.cfg.num_workers
        return [
            sample_task(weights, rng_from(self.cfg.seed, "worker-step", wid, step))
            for wid in range(self.cfg.num_workers)
        ]

    # -- one iteration --------------------------------------------------------

    def _payload(self, slot: WorkerSlot, task: TaskSpec, step: int, tau: float):
        rng = rng_from(self.cfg.seed, "worker-step", slot.worker_id, step)
        if self.cfg.sampling_mode == "simt":
            sample_task([t.sampling_weight for t in self.tasks], rng)  # consume the task draw
        noise = sample_gumbel(
            rng, (self.model.backbone.n_layers, self.model.backbone.n_units))
        batch = next_batch(task, "train", slot.streams[task.name])
        bn_means: Dict[Tuple[int, int], np.ndarray] = {}
        gen = self.model.forward_train(task, batch.x, batch.y, tau, noise,
                                       self.cfg.routing, self.cfg.sync_bn)
        reply = None
        layer = 0
        first = True
        while True:
            try:
                stats = next(gen) if first else gen.send(reply)
            except StopIteration as stop:
                out: WorkerOutput = stop.value
                break
            first = False
            for k in sorted(stats):
                count, s, _ = stats[k]
                bn_means[(layer, k)] = (s / count).astype(np.float32)
            reply = yield (layer, stats)
            layer += 1
        if not np.isfinite(out.loss.data):
            raise TrainingDiverged(slot.worker_id, task.name, step)
        out.loss.tape.backward(out.loss)
        return WorkerResult(slot.worker_id, task.name, float(out.loss.data),
                            out.grads(), bn_means)

    def _advance_all(self, gens, replies, first: bool):
        if self._pool is not None:
            futures = [self._pool.submit(_advance, g, r, first)
                       for g, r in zip(gens, replies)]
            return [f.result() for f in futures]
        return [_advance(g, r, first) for g, r in zip(gens, replies)]

    def run_iteration(self) -> IterationResult:
        step = self.step
        cfg = self.cfg
        tau = temperature_schedule(step, cfg)
        lr = lr_schedule(step, cfg)
        chosen = self.sampled_tasks(step)
        gens = [
            self._payload(slot, self.tasks[chosen[i]], step, tau)
            for i, slot in enumerate(self.slots)
        ]

        replies: List[Optional[dict]] = [None] * len(gens)
        spread_terms: List[float] = []
        states = self._advance_all(gens, replies, first=True)
        for _ in range(self.model.backbone.n_layers):
            layer = None
            for kind, item in states:
                if kind != "yield":
                    raise RuntimeError("worker finished before all BN barriers")
                layer = item[0] if layer is None else layer
                if item[0] != layer:
                    raise RuntimeError("workers out of lockstep at a BN barrier")
            per_unit: Dict[int, List[Tuple[int, tuple]]] = {}
            for wid, (_, item) in enumerate(states):
                for k in sorted(item[1]):
                    per_unit.setdefault(k, []).append((wid, item[1][k]))
            replies = [dict() for _ in gens]
            for k in sorted(per_unit):
                contribs = per_unit[k]
                if cfg.sync_bn:
                    mean, var = syncbn_reduce([c for _, c in contribs])
                    for wid, _ in contribs:
                        replies[wid][k] = (mean, var)
                    self.model.backbone.layers[layer].units[k].update_running(mean, var)
                else:
                    for wid, c in contribs:
                        mean, var = syncbn_reduce([c])
                        replies[wid][k] = (mean, var)
                        self.model.backbone.layers[layer].units[k].update_running(mean, var)
                if len(contribs) >= 2:
                    means = np.stack([(c[1] / c[0]) for _, c in contribs])
                    spread_terms.append(float(means.std(axis=0).mean()))
            states = self._advance_all(gens, replies, first=False)

        results: List[WorkerResult] = []
        for kind, item in states:
            if kind != "done":
                raise RuntimeError("worker still waiting after the last BN barrier")
            results.append(item)

        fusion = fuse_gradients([r.grads for r in results], self.param_ids)
        sgd_step(self.params, fusion.fused, lr, cfg.momentum, cfg.weight_decay)
        self.step += 1

        spread = float(np.mean(spread_terms)) if spread_terms else 0.0
        hist = fusion.histogram()
        records = [
            {"step": step, "worker": r.worker_id, "task": r.task,
             "loss": r.loss, "lr": lr, "tau": tau,
             "ngpu_histogram": hist, "bn_spread": spread}
            for r in results
        ]
        return IterationResult(step, lr, tau, records, fusion, spread)

    def run(self, steps: Optional[int] = None,
            metrics: Optional["MetricsWriter"] = None,
            checkpoint_path: Optional[str] = None,
            checkpoint_every: int = 0,
            config_text: str = "") -> List[dict]:
        """Run up to total_steps, optionally checkpointing along the way."""
        from .checkpoint import save_checkpoint

        target = self.cfg.total_steps if steps is None else min(
            self.step + steps, self.cfg.total_steps)
        all_records: List[dict] = []
        while self.step < target:
            result = self.run_iteration()
            all_records.extend(result.records)
            if metrics is not None:
                for rec in result.records:
                    metrics.write(rec)
            if (checkpoint_path and checkpoint_every
                    and self.step % checkpoint_every == 0
                    and self.step < target):
                save_checkpoint(checkpoint_path, self, config_text)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self, config_text)
        return all_records

    def summary(self) -> dict:
        """Final per-task validation losses and extracted paths."""
        val_losses = {t.name: evaluate_task(self.model, t) for t in self.tasks}
        paths = {t.name: self.model.extract_path(t.name).selections
                 for t in self.tasks}
        return {
            "summary": True,
            "step": self.step,
            "mode": self.cfg.sampling_mode,
            "sync_bn": self.cfg.sync_bn,
            "routing": self.cfg.routing,
            "val_loss": val_losses,
            "paths": paths,
        }


class MetricsWriter:
    """Line-delimited JSON sink."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
