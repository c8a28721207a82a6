"""Dense numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is picked once at import time from the LEGOFLOW_BACKEND
environment variable ("numba" or "numpy"). Unset means numba when it is
importable, numpy otherwise. Both backends are deterministic run-to-run;
they are not guaranteed bit-identical to each other because accumulation
orders differ.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _resolve_backend() -> str:
    env = os.environ.get("LEGOFLOW_BACKEND", "").strip().lower()
    if env in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if env not in ("numba", "numpy"):
        raise ValueError(f"LEGOFLOW_BACKEND must be 'numba' or 'numpy', got {env!r}")
    if env == "numba" and not HAVE_NUMBA:
        raise ImportError("LEGOFLOW_BACKEND=numba but numba is not installed")
    return env


BACKEND = _resolve_backend()


def backend_name() -> str:
    return BACKEND


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_bn_stats(x):
    # float64 accumulators keep merged statistics exact to ~1e-7 even for
    # batches in the thousands
    s = x.sum(axis=0, dtype=np.float64)
    sq = np.square(x, dtype=np.float64).sum(axis=0)
    return s, sq


def _np_bn_forward(x, mean, inv_std, gamma, beta):
    return ((x - mean) * inv_std * gamma + beta).astype(np.float32, copy=False)


def _np_bn_backward(dy, x, mean, inv_std, gamma):
    xhat = (x - mean) * inv_std
    dx = dy * (gamma * inv_std)
    dgamma = (dy * xhat).sum(axis=0).astype(np.float32, copy=False)
    dbeta = dy.sum(axis=0).astype(np.float32, copy=False)
    return dx.astype(np.float32, copy=False), dgamma, dbeta


def _np_relu_forward(x):
    return np.maximum(x, np.float32(0.0))


def _np_relu_backward(dy, y):
    return np.where(y > 0, dy, np.float32(0.0))


def _np_softmax_xent_forward(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    probs = shifted
    n = logits.shape[0]
    picked = probs[np.arange(n), labels].astype(np.float64)
    loss = -np.log(picked).mean()
    return float(loss), probs


def _np_softmax_xent_backward(probs, labels, gscale):
    d = probs * np.float32(gscale)
    d[np.arange(probs.shape[0]), labels] -= np.float32(gscale)
    return d


def _np_sgd_update(w, vel, grad, lr, momentum, weight_decay):
    vel *= np.float32(momentum)
    vel += grad
    if weight_decay != 0.0:
        vel += np.float32(weight_decay) * w
    w -= np.float32(lr) * vel


# ---------------------------------------------------------------------------
# numba implementations (explicit loops so the whole kernel fuses)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_bn_stats(x):
    n, f = x.shape
    s = np.zeros(f, dtype=np.float64)
    sq = np.zeros(f, dtype=np.float64)
    for i in range(n):
        for j in range(f):
            v = np.float64(x[i, j])
            s[j] += v
            sq[j] += v * v
    return s, sq


@njit(cache=True)
def _nb_bn_forward(x, mean, inv_std, gamma, beta):
    n, f = x.shape
    y = np.empty((n, f), dtype=np.float32)
    for i in range(n):
        for j in range(f):
            y[i, j] = (x[i, j] - mean[j]) * inv_std[j] * gamma[j] + beta[j]
    return y


@njit(cache=True)
def _nb_bn_backward(dy, x, mean, inv_std, gamma):
    n, f = x.shape
    dx = np.empty((n, f), dtype=np.float32)
    dgamma = np.zeros(f, dtype=np.float32)
    dbeta = np.zeros(f, dtype=np.float32)
    for i in range(n):
        for j in range(f):
            g = dy[i, j]
            dx[i, j] = g * gamma[j] * inv_std[j]
            dgamma[j] += g * (x[i, j] - mean[j]) * inv_std[j]
            dbeta[j] += g
    return dx, dgamma, dbeta


@njit(cache=True)
def _nb_relu_forward(x):
    n, f = x.shape
    y = np.empty((n, f), dtype=np.float32)
    for i in range(n):
        for j in range(f):
            v = x[i, j]
            y[i, j] = v if v > 0.0 else 0.0
    return y


@njit(cache=True)
def _nb_relu_backward(dy, y):
    n, f = y.shape
    dx = np.empty((n, f), dtype=np.float32)
    for i in range(n):
        for j in range(f):
            dx[i, j] = dy[i, j] if y[i, j] > 0.0 else 0.0
    return dx


@njit(cache=True)
def _nb_softmax_xent_forward(logits, labels):
    n, c = logits.shape
    probs = np.empty((n, c), dtype=np.float32)
    total = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(c):
            e = np.exp(logits[i, j] - m)
            probs[i, j] = e
            z += e
        inv = np.float32(1.0 / z)
        for j in range(c):
            probs[i, j] *= inv
        total += -np.log(np.float64(probs[i, labels[i]]))
    return total / n, probs


@njit(cache=True)
def _nb_softmax_xent_backward(probs, labels, gscale):
    n, c = probs.shape
    d = np.empty((n, c), dtype=np.float32)
    gs = np.float32(gscale)
    for i in range(n):
        for j in range(c):
            d[i, j] = probs[i, j] * gs
        d[i, labels[i]] -= gs
    return d


@njit(cache=True)
def _nb_sgd_update(w, vel, grad, lr, momentum, weight_decay):
    mom = np.float32(momentum)
    wd = np.float32(weight_decay)
    lr32 = np.float32(lr)
    for i in range(w.shape[0]):
        v = mom * vel[i] + grad[i] + wd * w[i]
        vel[i] = v
        w[i] -= lr32 * v


if BACKEND == "numba":
    bn_stats = _nb_bn_stats
    bn_forward = _nb_bn_forward
    bn_backward = _nb_bn_backward
    relu_forward = _nb_relu_forward
    relu_backward = _nb_relu_backward
    softmax_xent_forward = _nb_softmax_xent_forward
    softmax_xent_backward = _nb_softmax_xent_backward
    sgd_update = _nb_sgd_update
else:
    bn_stats = _np_bn_stats
    bn_forward = _np_bn_forward
    bn_backward = _np_bn_backward
    relu_forward = _np_relu_forward
    relu_backward = _np_relu_backward
    softmax_xent_forward = _np_softmax_xent_forward
    softmax_xent_backward = _np_softmax_xent_backward
    sgd_update = _np_sgd_update


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs."""
    x = np.ones((2, 3), dtype=np.float32)
    ones = np.ones(3, dtype=np.float32)
    zeros = np.zeros(3, dtype=np.float32)
    labels = np.zeros(2, dtype=np.int64)
    bn_stats(x)
    bn_forward(x, zeros, ones, ones, zeros)
    bn_backward(x, x, zeros, ones, ones)
    relu_backward(x, relu_forward(x))
    _, p = softmax_xent_forward(x, labels)
    softmax_xent_backward(p, labels, 0.5)
    sgd_update(ones.copy(), zeros.copy(), ones, 0.1, 0.9, 0.0)
