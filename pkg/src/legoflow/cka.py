"""Centered kernel alignment between layer activations, exact and batched.

Linear kernels only. HSIC is the biased estimate tr(KHLH)/(n-1)^2 with the
centering matrix H = I - 11^T/n. The batched variant averages per-minibatch
HSIC terms and combines them at the end, so full-dataset Gram matrices are
never formed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np


class DegenerateFeaturesError(ValueError):
    """Constant features make self-HSIC zero and the similarity undefined."""


def gram(x: np.ndarray, kernel: str = "linear") -> np.ndarray:
    """n x n kernel matrix of row features; only the linear kernel is wired."""
    if kernel != "linear":
        raise ValueError(f"unsupported kernel {kernel!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("feature matrix must be 2-d")
    return x @ x.T


def _center(k: np.ndarray) -> np.ndarray:
    # H K H without materializing H
    col = k.mean(axis=0, keepdims=True)
    row = k.mean(axis=1, keepdims=True)
    return k - col - row + k.mean()


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased HSIC estimate tr(KHLH)/(n-1)^2."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"gram shapes {k.shape} vs {l.shape}")
    n = k.shape[0]
    if n < 2:
        raise ValueError("HSIC needs at least two examples")
    return float((k * _center(l)).sum() / (n - 1) ** 2)


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Similarity of two feature matrices over the same examples, in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("feature matrices must share the example axis")
    k = gram(x)
    l = gram(y)
    xx = hsic(k, k)
    yy = hsic(l, l)
    if xx <= 0 or yy <= 0:
        raise DegenerateFeaturesError("constant features give zero self-HSIC")
    return hsic(k, l) / np.sqrt(xx * yy)


@dataclass
class SimilarityMatrix:
    row_labels: List[str]
    col_labels: List[str]
    values: np.ndarray

    @property
    def is_self(self) -> bool:
        return self.row_labels == self.col_labels


def _collect_activations(model, task: str, x: np.ndarray,
                         layers: Optional[Sequence[str]]) -> Dict[str, np.ndarray]:
    _, acts = model.forward_eval(task, x, collect=True)
    if layers is None:
        return acts
    missing = [name for name in layers if name not in acts]
    if missing:
        raise KeyError(f"unknown layer labels {missing}")
    return {name: acts[name] for name in layers}


def cka_matrix(model, task: str, x: np.ndarray,
               layers: Optional[Sequence[str]] = None,
               model_b=None) -> SimilarityMatrix:
    """Exact layer-pair CKA grid on one batch of inputs."""
    acts_a = _collect_activations(model, task, x, layers)
    acts_b = acts_a if model_b is None else _collect_activations(model_b, task, x, layers)
    rows = list(acts_a)
    cols = list(acts_b)
    values = np.zeros((len(rows), len(cols)))
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            values[i, j] = cka(acts_a[a], acts_b[b])
    return SimilarityMatrix(rows, cols, values)


def batched_cka(model, task: str, x: np.ndarray, minibatches: int = 10,
                layers: Optional[Sequence[str]] = None,
                model_b=None) -> SimilarityMatrix:
    """Layer-pair CKA from per-minibatch HSIC averages.

    The input set is cut into `minibatches` equal chunks; each chunk
    contributes HSIC(K_i, L_j), HSIC(K_i, K_i) and HSIC(L_j, L_j), and the
    final score is avg_xy / sqrt(avg_xx * avg_yy).
    """
    if minibatches < 2:
        raise ValueError("batched CKA needs at least two minibatches")
    chunk = len(x) // minibatches
    if chunk < 2:
        raise ValueError(
            f"{len(x)} examples are too few for {minibatches} minibatches")
    rows = cols = None
    xy = xx = yy = None
    other = model_b if model_b is not None else model
    for t in range(minibatches):
        xb = x[t * chunk:(t + 1) * chunk]
        acts_a = _collect_activations(model, task, xb, layers)
        acts_b = acts_a if model_b is None else _collect_activations(other, task, xb, layers)
        if rows is None:
            rows, cols = list(acts_a), list(acts_b)
            xy = np.zeros((len(rows), len(cols)))
            xx = np.zeros(len(rows))
            yy = np.zeros(len(cols))
        grams_a = [gram(acts_a[name]) for name in rows]
        grams_b = grams_a if model_b is None else [gram(acts_b[name]) for name in cols]
        for i, k in enumerate(grams_a):
            xx[i] += hsic(k, k)
        for j, l in enumerate(grams_b):
            yy[j] += hsic(l, l)
        for i, k in enumerate(grams_a):
            for j, l in enumerate(grams_b):
                xy[i, j] += hsic(k, l)
    xy /= minibatches
    xx /= minibatches
    yy /= minibatches
    if np.any(xx <= 0) or np.any(yy <= 0):
        raise DegenerateFeaturesError("constant features give zero self-HSIC")
    values = xy / np.sqrt(np.outer(xx, yy))
    return SimilarityMatrix(rows, cols, values)


def block_structure_score(sim: SimilarityMatrix, threshold: float = 0.8) -> float:
    """Largest contiguous layer window whose off-diagonal mean similarity
    clears the threshold, as a fraction of the layer count."""
    s = sim.values
    n = s.shape[0]
    if s.shape[0] != s.shape[1]:
        raise ValueError("block structure needs a square similarity matrix")
    best = 0
    for size in range(2, n + 1):
        for start in range(0, n - size + 1):
            window = s[start:start + size, start:start + size]
            off = window[~np.eye(size, dtype=bool)]
            if off.mean() > threshold:
                best = max(best, size)
                break
    return best / n if n else 0.0


def write_similarity_csv(sim: SimilarityMatrix, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + sim.col_labels)
        for label, row in zip(sim.row_labels, sim.values):
            writer.writerow([label] + [f"{v:.6f}" for v in row])


def write_summary_json(sim: SimilarityMatrix, path: str, threshold: float = 0.8) -> None:
    summary = {
        "block_score": block_structure_score(sim, threshold) if sim.is_self else None,
        "threshold": threshold,
        "layers": sim.row_labels,
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
