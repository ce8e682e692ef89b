"""Desk-scale fidelity and utility proxies for synthetic image sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import log_softmax


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    d = pdist(np.concatenate([x, y]))
    med = float(np.median(d))
    return med if med > 0 else 1.0


def mmd2(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD under an RBF kernel.

    The bandwidth defaults to the median pairwise distance of the pooled sets.
    """
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    gamma = 1.0 / (2.0 * bandwidth**2)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean")).mean()
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean")).mean()
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean")).mean()
    return max(float(kxx + kyy - 2.0 * kxy), 0.0)


def class_conditional_mmd2(x, y_labels, real_x, real_labels, n_classes: int) -> float:
    """Mean over classes of the per-class squared MMD."""
    vals = []
    for c in range(n_classes):
        a, b = x[y_labels == c], real_x[real_labels == c]
        if len(a) and len(b):
            vals.append(mmd2(a, b))
    return float(np.mean(vals))


@dataclass
class LogisticClassifier:
    """Multinomial logistic regression fit by full-batch gradient descent."""

    n_classes: int
    steps: int = 500
    lr: float = 0.5
    l2: float = 1e-4
    weights: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LogisticClassifier":
        n, d = x.shape
        w = np.zeros((d, self.n_classes))
        b = np.zeros(self.n_classes)
        onehot = np.eye(self.n_classes)[y]
        for _ in range(self.steps):
            p = np.exp(log_softmax(x @ w + b, axis=1))
            err = (p - onehot) / n
            w -= self.lr * (x.T @ err + self.l2 * w)
            b -= self.lr * err.sum(axis=0)
        self.weights, self.bias = w, b
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(x @ self.weights + self.bias, axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y))


@dataclass
class MetricsReport:
    mmd: float
    class_mmd: float
    util_acc: float
    class_counts: list[int]

    def to_dict(self) -> dict:
        return {
            "mmd": self.mmd,
            "class_mmd": self.class_mmd,
            "util_acc": self.util_acc,
            "class_counts": list(self.class_counts),
        }


def evaluate(synth_x, synth_y, real_x, real_y, n_classes: int) -> MetricsReport:
    """Fidelity (MMD to held-out real data) and utility (train-on-synthetic accuracy)."""
    clf = LogisticClassifier(n_classes).fit(synth_x, synth_y)
    return MetricsReport(
        mmd=mmd2(synth_x, real_x),
        class_mmd=class_conditional_mmd2(synth_x, synth_y, real_x, real_y, n_classes),
        util_acc=clf.accuracy(real_x, real_y),
        class_counts=np.bincount(synth_y, minlength=n_classes).tolist(),
    )
