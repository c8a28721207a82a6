"""Multi-task model: task stems and heads around the shared dynamic backbone.

Stems project task inputs of any width into the backbone dim, so tasks with
inconsistent shapes coexist; heads map backbone features to task outputs.
The training forward is a generator that pauses once per lego layer to
exchange batch-norm statistics with the coordinator.
"""

from __future__ import annotations

from typing import Dict, Generator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .network import Backbone, LegoLayer, Path, TaskController, lego_forward, routing_weights
from .seeding import rng_from
from .tasks import TaskSpec


class Stem:
    def __init__(self, task: str, input_dim: int, dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.dim = dim
        self.w = Parameter(f"stem.{task}.w", ad.uniform_init(rng, (input_dim, dim), input_dim))
        self.b = Parameter(f"stem.{task}.b", np.zeros(dim, dtype=np.float32))

    def params(self) -> List[Parameter]:
        return [self.w, self.b]

    def forward(self, x: Tensor, leaf) -> Tensor:
        return ad.add_bias(ad.matmul(x, leaf(self.w)), leaf(self.b))


class Head:
    """Linear task head: plain regressor, classifier, or per-position classifier."""

    def __init__(self, task: str, dim: int, kind: str, head_shape: Tuple[int, ...],
                 rng: np.random.Generator):
        self.kind = kind
        self.head_shape = head_shape
        out = int(np.prod(head_shape))
        self.w = Parameter(f"head.{task}.w", ad.uniform_init(rng, (dim, out), dim))
        self.b = Parameter(f"head.{task}.b", np.zeros(out, dtype=np.float32))

    def params(self) -> List[Parameter]:
        return [self.w, self.b]

    def forward(self, h: Tensor, leaf) -> Tensor:
        return ad.add_bias(ad.matmul(h, leaf(self.w)), leaf(self.b))

    def loss(self, out: Tensor, y: np.ndarray) -> Tensor:
        if self.kind == "regressor":
            return ad.mse(out, y)
        if self.kind == "classifier":
            return ad.softmax_cross_entropy(out, y)
        seq_len, classes = self.head_shape
        flat = ad.reshape(out, (-1, classes))
        return ad.softmax_cross_entropy(flat, np.asarray(y).reshape(-1))

    def predict(self, out_data: np.ndarray) -> np.ndarray:
        if self.kind == "regressor":
            return out_data
        if self.kind == "classifier":
            return out_data.argmax(axis=1)
        seq_len, classes = self.head_shape
        return out_data.reshape(-1, seq_len, classes).argmax(axis=2)


class WorkerOutput:
    """Loss tensor plus the per-parameter leaf tensors the forward touched."""

    __slots__ = ("loss", "used")

    def __init__(self, loss: Tensor, used: Dict[str, Tensor]):
        self.loss = loss
        self.used = used

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for pid, leaf in self.used.items():
            out[pid] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        return out


class MultiTaskModel:
    def __init__(self, backbone: Backbone):
        self.backbone = backbone
        self.task_order: List[str] = []
        self.stems: Dict[str, Stem] = {}
        self.heads: Dict[str, Head] = {}
        self.controllers: Dict[str, TaskController] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, suite: List[TaskSpec], n_layers: int, n_units: int, dim: int,
              seed: int, residual: bool = True) -> "MultiTaskModel":
        rng = rng_from(seed, "model-init")
        model = cls(Backbone.build(n_layers, n_units, dim, rng, residual=residual))
        for task in suite:
            model._attach(task, rng)
        return model

    @classmethod
    def from_backbone(cls, backbone: Backbone, suite: List[TaskSpec],
                      seed: int) -> "MultiTaskModel":
        model = cls(backbone)
        rng = rng_from(seed, "model-attach")
        for task in suite:
            model._attach(task, rng)
        return model

    @classmethod
    def from_structure(cls, structure: dict) -> "MultiTaskModel":
        """Skeleton with the recorded shapes; parameters are overwritten next."""
        rng = rng_from(0, "structure-init")
        model = cls(Backbone.build(structure["n_layers"], structure["n_units"],
                                   structure["dim"], rng,
                                   residual=structure.get("residual", True)))
        for entry in structure["tasks"]:
            name = entry["name"]
            model.stems[name] = Stem(name, entry["input_dim"], model.backbone.dim, rng)
            model.heads[name] = Head(name, model.backbone.dim, entry["head_kind"],
                                     tuple(entry["head_shape"]), rng)
            model.controllers[name] = TaskController(
                name, model.backbone.n_layers, model.backbone.n_units)
            model.task_order.append(name)
        return model

    def _attach(self, task: TaskSpec, rng: np.random.Generator) -> None:
        if task.name in self.stems:
            raise ValueError(f"task {task.name!r} already attached")
        dim = self.backbone.dim
        self.stems[task.name] = Stem(task.name, task.input_dim, dim, rng)
        self.heads[task.name] = Head(task.name, dim, task.head_kind, task.head_shape, rng)
        self.controllers[task.name] = TaskController(
            task.name, self.backbone.n_layers, self.backbone.n_units)
        self.task_order.append(task.name)

    def add_task(self, task: TaskSpec, seed: int) -> None:
        """Attach a downstream task: fresh stem/head, zero controller row."""
        self._attach(task, rng_from(seed, "task-init", task.name))

    # -- parameter plumbing --------------------------------------------------

    def params(self) -> List[Parameter]:
        out = list(self.backbone.params())
        for name in self.task_order:
            out.extend(self.stems[name].params())
            out.extend(self.heads[name].params())
            out.append(self.controllers[name].logits)
        return out

    def param_map(self) -> Dict[str, Parameter]:
        m = {}
        for p in self.params():
            if p.id in m:
                raise ValueError(f"duplicate parameter id {p.id!r}")
            m[p.id] = p
        return m

    # -- forwards ------------------------------------------------------------

    def forward_train(self, task: TaskSpec, x: np.ndarray, y: np.ndarray,
                      tau: float, noise: np.ndarray, mode: str,
                      sync_bn: bool) -> Generator:
        """Training forward/backward payload for one worker.

        Yields one {unit_index: (count, sum, sum_sq)} dict per lego layer and
        expects {unit_index: (mean, var)} back. When sync_bn is false the
        caller echoes each worker's own statistics. Returns a WorkerOutput;
        backward has NOT run yet so the driver can run it off-barrier.
        """
        tape = Tape()
        used: Dict[str, Tensor] = {}

        def leaf(p: Parameter) -> Tensor:
            t = used.get(p.id)
            if t is None:
                t = p.leaf(tape)
                used[p.id] = t
            return t

        controller = self.controllers[task.name]
        h = self.stems[task.name].forward(Tensor(x, tape), leaf)
        for layer in self.backbone.layers:
            weights = routing_weights(controller, layer.index, tau,
                                      noise[layer.index], mode, leaf)
            if mode == "soft":
                active = list(range(layer.n_units))
            else:
                active = [int(np.argmax(weights.data))]
            pre = {k: layer.units[k].pre_activation(h, leaf) for k in active}
            stats = {k: ad.bn_local_stats(pre[k]) for k in active}
            replies = yield stats
            outs = [layer.units[k].finish(h, pre[k], *replies[k], leaf) for k in active]
            h = ad.weighted_sum(outs, weights, positions=active)
        out = self.heads[task.name].forward(h, leaf)
        loss = self.heads[task.name].loss(out, y)
        if task.loss_weight != 1.0:
            loss = ad.mul_scalar(loss, task.loss_weight)
        return WorkerOutput(loss, used)

    def forward_eval(self, task_name: str, x: np.ndarray, mode: str = "argmax",
                     collect: bool = False):
        """Inference with running BN statistics; argmax follows the learned path."""
        if task_name not in self.stems:
            raise KeyError(f"unknown task {task_name!r}")
        leaf = lambda p: p.leaf(None)
        acts: Dict[str, np.ndarray] = {}
        h = self.stems[task_name].forward(Tensor(x), leaf)
        if collect:
            acts["stem"] = h.data
        controller = self.controllers[task_name]
        probs = controller.probabilities()
        for layer in self.backbone.layers:
            w = probs[layer.index]
            if mode == "argmax":
                onehot = np.zeros_like(w)
                onehot[int(np.argmax(w))] = 1.0
                w = onehot
            elif mode != "soft":
                raise ValueError(f"eval mode {mode!r}")
            h = lego_forward(h, layer, Tensor(w), "argmax" if mode == "argmax" else "soft",
                             leaf=leaf)
            if collect:
                acts[f"layer{layer.index}"] = h.data
        out = self.heads[task_name].forward(h, leaf)
        if collect:
            return out.data, acts
        return out.data

    def extract_path(self, task_name: str) -> Path:
        from .network import extract_path
        return extract_path(self.controllers, task_name)


def evaluate_task(model: MultiTaskModel, task: TaskSpec, split: str = "val",
                  mode: str = "argmax", eval_batch: int = 256) -> float:
    """Mean unweighted task loss over a split, using running BN statistics."""
    x, y = task.dataset.split(split)
    head = model.heads[task.name]
    total, count = 0.0, 0
    for start in range(0, len(x), eval_batch):
        xb = x[start:start + eval_batch]
        yb = y[start:start + eval_batch]
        out = model.forward_eval(task.name, xb, mode=mode)
        loss = head.loss(Tensor(out), yb)
        total += float(loss.data) * len(xb)
        count += len(xb)
    return total / count
