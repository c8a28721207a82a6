"""Reverse-mode autodiff on dense float32 tensors.

A Tape records one backward closure per op in append order and replays
them strictly in reverse, so gradient accumulation order is fixed and
repeated runs are bit-identical. Tapes are single-use: call reset() to
reuse one. Tensors built without a tape run in pure-eval mode and record
nothing.

Batch-norm statistics are deliberately constants with respect to the
graph: bn_local_stats returns tape-free accumulators and bn_apply
backpropagates only through the activations and the affine parameters,
never through the supplied mean/var.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class TapeReuseError(RuntimeError):
    """backward() ran twice on the same tape without reset()."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf escaped a forward or backward pass."""


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tape:
    __slots__ = ("_nodes", "_spent")

    def __init__(self):
        self._nodes = []
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)

    def append(self, backward_fn) -> None:
        self._nodes.append(backward_fn)

    def backward(self, loss: "Tensor") -> None:
        if self._spent:
            raise TapeReuseError("tape already consumed; call reset() first")
        if loss.tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        if loss.data.ndim != 0:
            raise ShapeError("backward seed must be a scalar tensor")
        self._spent = True
        loss._accumulate(np.ones((), dtype=np.float32))
        for fn in reversed(self._nodes):
            fn()

    def reset(self) -> None:
        self._nodes.clear()
        self._spent = False


class Tensor:
    """Dense float32 array, optionally attached to a tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: Optional[Tape] = None):
        self.data = _as_f32(data)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tape={self.tape is not None})"


class Parameter:
    """Named trainable array with its SGD momentum buffer.

    decay=False exempts the parameter from weight decay (used for routing
    logits, which decay would pull back toward uniform).
    """

    __slots__ = ("id", "value", "momentum", "trainable", "decay")

    def __init__(self, id: str, value, trainable: bool = True, decay: bool = True):
        self.id = id
        self.value = _as_f32(value)
        self.momentum = np.zeros_like(self.value)
        self.trainable = trainable
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def leaf(self, tape: Optional[Tape] = None) -> Tensor:
        """Wrap the shared value array in a fresh per-use Tensor.

        The data buffer is shared read-only; the grad buffer belongs to the
        wrapper, so concurrent workers never race on accumulation.
        """
        t = Tensor.__new__(Tensor)
        t.data = self.value
        t.grad = None
        t.tape = tape
        return t

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def assert_finite(t: Tensor, context: str = "") -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values in {context or 'tensor'}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.data @ b.data, tape)
    if tape is not None:
        def backward():
            g = out.grad
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)
        tape.append(backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes {a.data.shape} vs {b.data.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        def backward():
            a._accumulate(out.grad)
            b._accumulate(out.grad)
        tape.append(backward)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias shapes {x.data.shape} + {b.data.shape}")
    tape = _tape_of(x, b)
    out = Tensor(x.data + b.data, tape)
    if tape is not None:
        def backward():
            x._accumulate(out.grad)
            b._accumulate(out.grad.sum(axis=0))
        tape.append(backward)
    return out


def mul_scalar(x: Tensor, c: float) -> Tensor:
    tape = x.tape
    c32 = np.float32(c)
    out = Tensor(x.data * c32, tape)
    if tape is not None:
        def backward():
            x._accumulate(out.grad * c32)
        tape.append(backward)
    return out


def dot(x: Tensor, c: np.ndarray) -> Tensor:
    """Scalar inner product with a constant array."""
    c = _as_f32(c)
    if x.data.shape != c.shape:
        raise ShapeError(f"dot shapes {x.data.shape} vs {c.shape}")
    tape = x.tape
    out = Tensor(np.float32(np.vdot(x.data, c)), tape)
    if tape is not None:
        def backward():
            x._accumulate(c * out.grad)
        tape.append(backward)
    return out


def relu(x: Tensor) -> Tensor:
    tape = x.tape
    out = Tensor(kernels.relu_forward(x.data), tape)
    if tape is not None:
        def backward():
            x._accumulate(kernels.relu_backward(out.grad, out.data))
        tape.append(backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    tape = x.tape
    out = Tensor(x.data.reshape(shape).copy(), tape)
    if tape is not None:
        def backward():
            x._accumulate(out.grad.reshape(x.data.shape))
        tape.append(backward)
    return out


def take_row(x: Tensor, i: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("take_row expects a matrix")
    tape = x.tape
    out = Tensor(x.data[i], tape)
    if tape is not None:
        def backward():
            g = np.zeros_like(x.data)
            g[i] = out.grad
            x._accumulate(g)
        tape.append(backward)
    return out


# ---------------------------------------------------------------------------
# batch normalization, with externally supplied statistics
# ---------------------------------------------------------------------------


def bn_local_stats(x: Tensor):
    """Per-feature (count, sum, sum_sq) of a batch, as float64 accumulators.

    Tape-free on purpose: these feed the cross-worker reduction and the
    resulting mean/var are treated as constants in backward.
    """
    if x.data.ndim != 2:
        raise ShapeError("bn_local_stats expects (batch, features)")
    n = x.data.shape[0]
    if n < 1:
        raise ValueError("bn_local_stats on an empty batch")
    s, sq = kernels.bn_stats(x.data)
    return n, s, sq


def bn_apply(x: Tensor, mean: np.ndarray, var: np.ndarray, gamma: Tensor,
             beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize with given statistics; grads flow to x, gamma, beta only."""
    if np.any(var < 0):
        raise ValueError("negative variance passed to bn_apply")
    mean32 = _as_f32(mean)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    tape = _tape_of(x, gamma, beta)
    out = Tensor(kernels.bn_forward(x.data, mean32, inv_std, gamma.data, beta.data), tape)
    if tape is not None:
        def backward():
            dx, dgamma, dbeta = kernels.bn_backward(
                out.grad, x.data, mean32, inv_std, gamma.data)
            x._accumulate(dx)
            gamma._accumulate(dgamma)
            beta._accumulate(dbeta)
        tape.append(backward)
    return out


# ---------------------------------------------------------------------------
# routing ops
# ---------------------------------------------------------------------------


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(np.float32)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel noise, -log(-log(U)) with U uniform in (0, 1)."""
    u = rng.random(shape)
    return (-np.log(-np.log(u + 1e-20) + 1e-20)).astype(np.float32)


def gumbel_softmax_probs(logits: np.ndarray, tau: float, noise: np.ndarray) -> np.ndarray:
    """Plain-array relaxed sample; noise may be batched as (..., N)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = np.asarray(logits, dtype=np.float64)
    logp = a - a.max() - np.log(np.exp(a - a.max()).sum())
    z = (logp + np.asarray(noise, dtype=np.float64)) / tau
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def gumbel_softmax(logits: Tensor, tau: float, noise: np.ndarray) -> Tensor:
    """Relaxed categorical sample from a logit row.

    Forward: softmax((log_softmax(logits) + noise) / tau). The result sums
    to one and concentrates on the argmax as tau shrinks.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if logits.data.ndim != 1:
        raise ShapeError("gumbel_softmax expects a 1-d logit row")
    if noise.shape != logits.data.shape:
        raise ShapeError("noise shape must match the logit row")
    a = logits.data
    shifted = a - a.max()
    logp = shifted - np.log(np.exp(shifted).sum(dtype=np.float64)).astype(np.float32)
    z = (logp + noise.astype(np.float32)) / np.float32(tau)
    u = _stable_softmax(z)
    tape = logits.tape
    out = Tensor(u, tape)
    if tape is not None:
        p = _stable_softmax(a)
        inv_tau = np.float32(1.0 / tau)
        def backward():
            du = out.grad
            dz = u * (du - np.vdot(u, du))
            ds = dz * inv_tau
            logits._accumulate(ds - p * ds.sum())
        tape.append(backward)
    return out


def straight_through(u: Tensor) -> Tensor:
    """One-hot at argmax(u) in forward; identity gradient in backward.

    Ties break to the lowest index.
    """
    tape = u.tape
    hard = np.zeros_like(u.data)
    hard[int(np.argmax(u.data))] = 1.0
    out = Tensor(hard, tape)
    if tape is not None:
        def backward():
            u._accumulate(out.grad)
        tape.append(backward)
    return out


def weighted_sum(parts: Sequence[Tensor], weights: Tensor,
                 positions: Optional[Sequence[int]] = None) -> Tensor:
    """Mixture sum(weights[positions[j]] * parts[j]); grads flow to both.

    positions defaults to 0..len(parts)-1, i.e. one part per weight. A
    sparse evaluation (hard routing) passes only the active parts with
    their weight indices; absent positions receive zero weight gradient.
    """
    if weights.data.ndim != 1:
        raise ShapeError("weights must be a 1-d row")
    pos = list(range(len(parts))) if positions is None else list(positions)
    if len(pos) != len(parts):
        raise ShapeError(f"{len(parts)} parts vs {len(pos)} positions")
    if positions is None and weights.data.shape != (len(parts),):
        raise ShapeError(f"{len(parts)} parts vs weight row {weights.data.shape}")
    if pos and max(pos) >= weights.data.shape[0]:
        raise ShapeError("weight position out of range")
    tape = _tape_of(*parts, weights)
    acc = parts[0].data * weights.data[pos[0]]
    for j in range(1, len(parts)):
        acc = acc + parts[j].data * weights.data[pos[j]]
    out = Tensor(acc, tape)
    if tape is not None:
        def backward():
            g = out.grad
            dw = np.zeros(weights.data.shape[0], dtype=np.float32)
            for j, part in enumerate(parts):
                part._accumulate(g * weights.data[pos[j]])
                dw[pos[j]] += np.vdot(part.data, g)
            weights._accumulate(dw)
        tape.append(backward)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy over rows of (batch, classes) logits."""
    if logits.data.ndim != 2:
        raise ShapeError("cross entropy expects (batch, classes) logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label outside [0, {c})")
    loss, probs = kernels.softmax_xent_forward(logits.data, labels)
    tape = logits.tape
    out = Tensor(np.float32(loss), tape)
    if tape is not None:
        def backward():
            gscale = float(out.grad) / n
            logits._accumulate(kernels.softmax_xent_backward(probs, labels, gscale))
        tape.append(backward)
    return out


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over every element."""
    target = _as_f32(target)
    if pred.data.shape != target.shape:
        raise ShapeError(f"mse shapes {pred.data.shape} vs {target.shape}")
    diff = pred.data - target
    loss = np.float32(np.mean(diff.astype(np.float64) ** 2))
    tape = pred.tape
    out = Tensor(loss, tape)
    if tape is not None:
        scale = np.float32(2.0 / diff.size)
        def backward():
            pred._accumulate(diff * (scale * out.grad))
        tape.append(backward)
    return out


# ---------------------------------------------------------------------------
# initialization and the optimizer step
# ---------------------------------------------------------------------------


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def sgd_step(params: Iterable[Parameter], fused_grads: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """Momentum SGD over exactly the parameters present in fused_grads.

    v <- momentum*v + g + wd*w ; w <- w - lr*v. Parameters without a fused
    gradient this call are untouched, including their momentum buffers.
    """
    for p in params:
        g = fused_grads.get(p.id)
        if g is None or not p.trainable:
            continue
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient shape {g.shape} for {p.id} {p.value.shape}")
        wd = weight_decay if p.decay else 0.0
        kernels.sgd_update(p.value.ravel(), p.momentum.ravel(),
                           _as_f32(g).ravel(), lr, momentum, wd)
