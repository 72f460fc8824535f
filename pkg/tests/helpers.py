"""Small hand-built models shared by the test modules."""

import numpy as np

from witchcraft.network import Layer, Model
from witchcraft.tensor import Tensor


def linear_model(weights, bias=None, dtype=np.float64) -> Model:
    """Single dense layer; ``weights`` is (d, classes)."""
    w = np.asarray(weights, dtype=dtype)
    b = np.zeros(w.shape[1], dtype=dtype) if bias is None else np.asarray(bias, dtype=dtype)
    return Model((Layer("dense", (Tensor(w), Tensor(b))),), (w.shape[0],), w.shape[1], "linear")


def binary_logistic(w, dtype=np.float64) -> Model:
    """Two-class model with logits (w.x, 0): softmax reduces to sigmoid(w.x) for class 0."""
    w = np.asarray(w, dtype=dtype)
    return linear_model(np.stack([w, np.zeros_like(w)], axis=1), dtype=dtype)
