"""Dynamic backbone built from layers of interchangeable candidate units.

Every layer holds N units of identical shape (linear -> BN -> ReLU with a
residual add). A per-task controller keeps an L x N logit matrix; rows are
turned into routing weights by a relaxed categorical sample. Soft routing
mixes all unit outputs, hard routing runs only the sampled unit behind a
straight-through estimator, and argmax is the deterministic test-time mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    bn_apply,
    gumbel_softmax,
    matmul,
    relu,
    straight_through,
    take_row,
    uniform_init,
    weighted_sum,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

ROUTING_MODES = ("soft", "hard", "argmax")


class LegoUnit:
    """One candidate block: relu(bn(x @ w)), plus x when residual is on.

    Statistics for the BN step always come from outside (the cross-worker
    reduction during training, running buffers at eval).
    """

    def __init__(self, name: str, dim: int, rng: np.random.Generator,
                 residual: bool = True):
        self.name = name
        self.dim = dim
        self.residual = residual
        self.w = Parameter(f"{name}.linear.w", uniform_init(rng, (dim, dim), dim))
        self.gamma = Parameter(f"{name}.bn.gamma", np.ones(dim, dtype=np.float32))
        self.beta = Parameter(f"{name}.bn.beta", np.zeros(dim, dtype=np.float32))
        self.running_mean = np.zeros(dim, dtype=np.float32)
        self.running_var = np.ones(dim, dtype=np.float32)

    def params(self) -> List[Parameter]:
        return [self.w, self.gamma, self.beta]

    def pre_activation(self, x: Tensor, leaf) -> Tensor:
        return matmul(x, leaf(self.w))

    def finish(self, x: Tensor, h: Tensor, mean, var, leaf) -> Tensor:
        normed = bn_apply(h, mean, var, leaf(self.gamma), leaf(self.beta), BN_EPS)
        out = relu(normed)
        return add(x, out) if self.residual else out

    def forward_with_stats(self, x: Tensor, mean, var, leaf) -> Tensor:
        return self.finish(x, self.pre_activation(x, leaf), mean, var, leaf)

    def forward_running(self, x: Tensor, leaf) -> Tensor:
        return self.forward_with_stats(x, self.running_mean, self.running_var, leaf)

    def update_running(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = np.float32(BN_MOMENTUM)
        self.running_mean += m * (mean.astype(np.float32) - self.running_mean)
        self.running_var += m * (var.astype(np.float32) - self.running_var)

    def copy(self, name: str) -> "LegoUnit":
        c = LegoUnit.__new__(LegoUnit)
        c.name = name
        c.dim = self.dim
        c.residual = self.residual
        c.w = Parameter(f"{name}.linear.w", self.w.value.copy())
        c.gamma = Parameter(f"{name}.bn.gamma", self.gamma.value.copy())
        c.beta = Parameter(f"{name}.bn.beta", self.beta.value.copy())
        c.running_mean = self.running_mean.copy()
        c.running_var = self.running_var.copy()
        return c


class LegoLayer:
    def __init__(self, index: int, units: List[LegoUnit]):
        self.index = index
        self.units = units

    @property
    def n_units(self) -> int:
        return len(self.units)


class Backbone:
    """Stack of lego layers over a fixed feature width."""

    def __init__(self, layers: List[LegoLayer], dim: int):
        if not layers:
            raise ValueError("backbone needs at least one layer")
        self.layers = layers
        self.dim = dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_units(self) -> int:
        return self.layers[0].n_units

    def params(self) -> List[Parameter]:
        out = []
        for layer in self.layers:
            for unit in layer.units:
                out.extend(unit.params())
        return out

    @staticmethod
    def build(n_layers: int, n_units: int, dim: int, rng: np.random.Generator,
              namespace: str = "backbone", residual: bool = True) -> "Backbone":
        layers = []
        for l in range(n_layers):
            units = [LegoUnit(f"{namespace}.layer{l}.unit{k}", dim, rng, residual)
                     for k in range(n_units)]
            layers.append(LegoLayer(l, units))
        return Backbone(layers, dim)


@dataclass
class Path:
    """Per-layer unit selections for one task."""

    selections: List[int]

    def __len__(self) -> int:
        return len(self.selections)

    def agreement(self, other: "Path") -> int:
        if len(self) != len(other):
            raise ShapeError("paths of different depth")
        return sum(int(a == b) for a, b in zip(self.selections, other.selections))


class TaskController:
    """Learnable routing logits of one task, one row per backbone layer.

    Rows start at zero so every unit is equally likely at the beginning of
    training. The logits are exempt from weight decay.
    """

    def __init__(self, task: str, n_layers: int, n_units: int):
        self.task = task
        self.logits = Parameter(f"controller.{task}", np.zeros((n_layers, n_units), dtype=np.float32), decay=False)

    @property
    def n_layers(self) -> int:
        return self.logits.value.shape[0]

    @property
    def n_units(self) -> int:
        return self.logits.value.shape[1]

    def probabilities(self) -> np.ndarray:
        a = self.logits.value.astype(np.float64)
        e = np.exp(a - a.max(axis=1, keepdims=True))
        return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)

    def path(self) -> Path:
        return Path([int(np.argmax(row)) for row in self.logits.value])


def extract_path(controllers: Dict[str, TaskController], task: str) -> Path:
    """Argmax selection per layer for a task; ties go to the lowest index."""
    if task not in controllers:
        raise KeyError(f"no controller for task {task!r}")
    return controllers[task].path()


def routing_weights(controller: TaskController, layer: int, tau: float,
                    noise: np.ndarray, mode: str, leaf) -> Tensor:
    """Per-layer routing weights on the tape: relaxed sample, optionally hardened."""
    if mode not in ("soft", "hard"):
        raise ValueError(f"routing mode {mode!r}")
    row = take_row(leaf(controller.logits), layer)
    u = gumbel_softmax(row, tau, noise)
    if mode == "hard":
        u = straight_through(u)
    return u


def lego_forward(x: Tensor, layer: LegoLayer, weights: Tensor, mode: str,
                 leaf: Optional[Callable[[Parameter], Tensor]] = None,
                 stats: Optional[dict] = None) -> Tensor:
    """Run one lego layer under given routing weights.

    Soft mode evaluates every unit and mixes the outputs; hard and argmax
    modes evaluate only the selected unit. `stats` maps unit index to a
    (mean, var) pair; units fall back to their running statistics.
    """
    if mode not in ROUTING_MODES:
        raise ValueError(f"routing mode {mode!r}")
    if weights.data.shape != (layer.n_units,):
        raise ShapeError(
            f"{layer.n_units} units but weight row {weights.data.shape}")
    if leaf is None:
        leaf = lambda p: p.leaf(x.tape)

    def unit_out(k: int) -> Tensor:
        unit = layer.units[k]
        if stats is not None and k in stats:
            mean, var = stats[k]
            return unit.forward_with_stats(x, mean, var, leaf)
        return unit.forward_running(x, leaf)

    if mode == "soft":
        return weighted_sum([unit_out(k) for k in range(layer.n_units)], weights)
    selected = int(np.argmax(weights.data))
    return weighted_sum([unit_out(selected)], weights, positions=[selected])


def materialize_static(backbone: Backbone, path: Path,
                       namespace: str = "static") -> Backbone:
    """Copy the selected unit of every layer into a single-unit backbone.

    The copies own fresh parameter and running-stat buffers, so training the
    static network never touches the dynamic one.
    """
    if len(path) != backbone.n_layers:
        raise ShapeError(
            f"path of length {len(path)} for {backbone.n_layers} layers")
    layers = []
    for l, choice in enumerate(path.selections):
        if not 0 <= choice < backbone.layers[l].n_units:
            raise ValueError(f"unit index {choice} out of range at layer {l}")
        unit = backbone.layers[l].units[choice].copy(f"{namespace}.layer{l}.unit0")
        layers.append(LegoLayer(l, [unit]))
    return Backbone(layers, backbone.dim)


# ---------------------------------------------------------------------------
# path text format: header "L=<n> N=<n>", one unit index per line
# ---------------------------------------------------------------------------


def dump_path(path: Path, n_units: int) -> str:
    lines = [f"L={len(path)} N={n_units}"]
    lines.extend(str(i) for i in path.selections)
    return "\n".join(lines) + "\n"


def parse_path(text: str) -> tuple:
    """Returns (Path, n_units); raises ValueError on any malformation."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("L="):
        raise ValueError("path file must start with a 'L=<n> N=<n>' header")
    try:
        head = dict(part.split("=") for part in lines[0].split())
        n_layers, n_units = int(head["L"]), int(head["N"])
    except (ValueError, KeyError) as exc:
        raise ValueError(f"bad path header {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != n_layers:
        raise ValueError(f"expected {n_layers} selections, found {len(body)}")
    selections = []
    for ln in body:
        idx = int(ln)
        if not 0 <= idx < n_units:
            raise ValueError(f"unit index {idx} outside [0, {n_units})")
        selections.append(idx)
    return Path(selections), n_units
