"""Linear SVM trained with Pegasos-style stochastic subgradient steps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

STD_FLOOR = 1e-8


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def standardize_fit(X: np.ndarray) -> Standardizer:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("standardize_fit needs an N x D matrix with N >= 2")
    return Standardizer(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    c_value: float
    standardizer: Optional[Standardizer] = None
    objective_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite SVM weights")
        if self.c_value <= 0:
            raise ValueError("C must be positive")


def _signs(y) -> np.ndarray:
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.size != 2 or not set(classes.tolist()) <= {0, 1}:
        raise ValueError("svm_train needs labels drawn from both classes {0, 1}")
    return np.where(y == 1, 1.0, -1.0)


def svm_objective(w: np.ndarray, b: float, X: np.ndarray, s: np.ndarray, lam: float) -> float:
    hinge = np.maximum(0.0, 1.0 - s * (X @ w + b))
    return 0.5 * lam * (w @ w + b * b) + hinge.mean()


def svm_train(X: np.ndarray, y, C: float, iterations: int = 1000, seed: int = 0,
              track_objective: bool = False) -> SvmModel:
    """Minimize lam/2 (|w|^2 + b^2) + mean hinge with lam = 1/(C N).

    ``iterations`` full passes over a seeded permutation; step t uses eta = 1/(lam t).
    The bias is learned as the weight of a constant input and is regularized with w.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    s = _signs(y)
    if C <= 0:
        raise ValueError("C must be positive")
    n, d = X.shape
    lam = 1.0 / (C * n)
    rng = np.random.default_rng(seed)
    # w = scale * v keeps the shrink step O(1)
    v = np.zeros(d)
    vb = 0.0
    scale = 1.0
    t = 0
    history = []
    for _ in range(iterations):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            xi = X[i]
            margin = scale * (v @ xi + vb)
            shrink = 1.0 - eta * lam
            if shrink <= 0.0:
                v[:] = 0.0
                vb = 0.0
                scale = 1.0
            else:
                scale *= shrink
            if s[i] * margin < 1.0:
                step = eta * s[i] / scale
                v += step * xi
                vb += step
            if scale < 1e-100:
                v *= scale
                vb *= scale
                scale = 1.0
        if track_objective:
            history.append(svm_objective(scale * v, scale * vb, X, s, lam))
    return SvmModel(scale * v, float(scale * vb), float(C), objective_history=history)


def svm_predict(model: SvmModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Class ids (1 where margin > 0, ties and negatives -> 0) and raw margins."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.weights.shape[0]:
        raise ValueError(f"feature dimension {X.shape[1]} != model dimension {model.weights.shape[0]}")
    if model.standardizer is not None:
        X = model.standardizer.apply(X)
    margins = X @ model.weights + model.bias
    return (margins > 0).astype(np.int64), margins
