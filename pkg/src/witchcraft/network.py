"""Layer stacks over the tensor core: evaluation, input gradients, argmax."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tape, Tensor

__all__ = [
    "LAYER_KINDS",
    "Layer",
    "Model",
    "forward",
    "logits",
    "loss_and_input_grad",
    "grad_input",
    "predict",
    "predict_logits",
]

# kind -> number of parameter tensors
LAYER_KINDS = {
    "dense": 2,
    "conv_same": 2,
    "conv_valid": 2,
    "relu": 0,
    "maxpool2": 0,
    "flatten": 0,
}


@dataclass(frozen=True)
class Layer:
    kind: str
    params: tuple[Tensor, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if len(self.params) != LAYER_KINDS[self.kind]:
            raise ValueError(f"{self.kind} takes {LAYER_KINDS[self.kind]} parameter tensors")

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-example output shape, or :class:`ShapeError` if ``in_shape`` does not fit."""
        k = self.kind
        if k == "relu":
            return in_shape
        if k == "flatten":
            return (int(np.prod(in_shape)),)
        if k == "maxpool2":
            if len(in_shape) != 3 or in_shape[0] % 2 or in_shape[1] % 2:
                raise ShapeError(f"maxpool2 needs (H, W, C) with even H, W; got {in_shape}")
            return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])
        w, b = self.params
        if k == "dense":
            if len(in_shape) != 1 or w.ndim != 2 or w.shape[0] != in_shape[0]:
                raise ShapeError(f"dense weight {w.shape} does not accept input {in_shape}")
            if b.shape != (w.shape[1],):
                raise ShapeError(f"dense bias {b.shape} does not match weight {w.shape}")
            return (w.shape[1],)
        # convolutions
        if len(in_shape) != 3 or w.ndim != 4 or w.shape[2] != in_shape[2]:
            raise ShapeError(f"conv weight {w.shape} does not accept input {in_shape}")
        if b.shape != (w.shape[3],):
            raise ShapeError(f"conv bias {b.shape} does not match weight {w.shape}")
        kh, kw = w.shape[:2]
        if k == "conv_same":
            if kh % 2 == 0 or kw % 2 == 0:
                raise ShapeError("'same' convolution needs odd kernel sizes")
            return (in_shape[0], in_shape[1], w.shape[3])
        ho, wo = in_shape[0] - kh + 1, in_shape[1] - kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {kh}x{kw} larger than input {in_shape}")
        return (ho, wo, w.shape[3])

    def apply(self, x: Tensor) -> Tensor:
        k = self.kind
        if k == "dense":
            return T.dense(x, *self.params)
        if k == "conv_same":
            return T.conv2d(x, *self.params, padding="same")
        if k == "conv_valid":
            return T.conv2d(x, *self.params, padding="valid")
        if k == "relu":
            return T.relu(x)
        if k == "maxpool2":
            return T.max_pool2x2(x)
        return T.flatten(x)


@dataclass(frozen=True)
class Model:
    """An ordered layer stack ending in one logit per class.

    Models are immutable; training returns a new instance.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    arch: str = "custom"
    _shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"network output {shapes[-1]} != ({self.num_classes},) logits")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float64)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def with_parameters(self, arrays: Sequence[np.ndarray]) -> "Model":
        """Copy of this model with its parameter tensors replaced in order."""
        arrays = list(arrays)
        if len(arrays) != len(self.parameters()):
            raise ValueError("parameter count mismatch")
        it = iter(arrays)
        layers = []
        for layer in self.layers:
            new = []
            for p in layer.params:
                a = np.asarray(next(it))
                if a.shape != p.shape:
                    raise ShapeError(f"{layer.kind}: parameter shape {a.shape} != {p.shape}")
                new.append(Tensor(a, dtype=a.dtype if a.dtype.kind == "f" else p.dtype))
            layers.append(Layer(layer.kind, tuple(new)))
        return Model(tuple(layers), self.input_shape, self.num_classes, self.arch)

    def astype(self, dtype) -> "Model":
        layers = tuple(
            Layer(layer.kind, tuple(Tensor(p.data, dtype=dtype) for p in layer.params))
            for layer in self.layers
        )
        return Model(layers, self.input_shape, self.num_classes, self.arch)


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x, False


def forward(model: Model, x, tape: Tape | None = None) -> Tensor:
    """Logits for a batch ``x`` of shape (batch, *input_shape).

    When ``tape`` is given, ``x`` is watched and every op is recorded on it.
    Pass a :class:`Tensor` to keep a handle for ``tape.gradient``.
    """
    xt = T.as_tensor(x)
    if xt.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {xt.shape} does not match model input {model.input_shape}")
    if tape is not None:
        tape.watch(xt)
    h = xt
    for layer in model.layers:
        h = layer.apply(h)
    return h


def logits(model: Model, x) -> np.ndarray:
    xb, single = _as_batch(model, x)
    out = forward(model, xb).data
    return out[0] if single else out


def loss_and_input_grad(model: Model, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example cross-entropy, logits and d(loss_i)/d(x_i) for a batch.

    Examples do not interact, so differentiating the summed loss yields each
    example's own input gradient.
    """
    xt = Tensor(x)
    with Tape() as tape:
        z = forward(model, xt, tape)
        loss = T.softmax_cross_entropy(z, y)
    (gx,) = tape.gradient(loss, [xt])
    return loss.data, z.data, gx.data


def grad_input(model: Model, x, y) -> np.ndarray:
    """Gradient of the softmax cross-entropy loss w.r.t. the input.

    Accepts a single example (with scalar label) or a batch.
    """
    xb, single = _as_batch(model, x)
    yb = np.atleast_1d(np.asarray(y))
    if yb.shape != (xb.shape[0],):
        raise ShapeError(f"{yb.shape[0]} labels for {xb.shape[0]} inputs")
    if yb.dtype.kind not in "iu" or np.any(yb < 0) or np.any(yb >= model.num_classes):
        raise ValueError(f"labels must be class indices in [0, {model.num_classes})")
    g = loss_and_input_grad(model, xb, yb)[2]
    return g[0] if single else g


def predict_logits(z) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(z), axis=-1)


def predict(model: Model, x):
    xb, single = _as_batch(model, x)
    labels = predict_logits(forward(model, xb).data)
    return int(labels[0]) if single else labels
