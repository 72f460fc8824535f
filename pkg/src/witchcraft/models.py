"""Target classifiers: construction, (adversarial) SGD training, weight files."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import PerturbationBudget, pgd, witchcraft
from .data import LabeledDataset
from .network import LAYER_KINDS, Layer, Model, forward
from .rng import substream
from .tensor import ShapeError, Tape, Tensor

__all__ = [
    "ARCHS",
    "AdversarialConfig",
    "TrainConfig",
    "WeightFormatError",
    "build_model",
    "mean_loss",
    "accuracy",
    "train_sgd",
    "adversarial_train",
    "save_weights",
    "load_weights",
]

log = logging.getLogger(__name__)

ARCHS = ("mlp-small", "cnn-2conv")


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), dtype=dtype)


def _dense(rng, n_in: int, n_out: int, dtype) -> Layer:
    return Layer("dense", (_uniform(rng, (n_in, n_out), n_in, dtype), Tensor(np.zeros(n_out), dtype=dtype)))


def _conv(rng, k: int, c_in: int, c_out: int, dtype) -> Layer:
    w = _uniform(rng, (k, k, c_in, c_out), k * k * c_in, dtype)
    return Layer("conv_same", (w, Tensor(np.zeros(c_out), dtype=dtype)))


def build_model(
    arch: str,
    seed: int = 0,
    *,
    input_shape: tuple[int, ...] | None = None,
    num_classes: int = 10,
    hidden: int = 64,
    widths: tuple[int, int] = (16, 32),
    kernel: int = 5,
    dtype=np.float32,
) -> Model:
    """Deterministically initialised model.

    ``mlp-small``: [flatten] -> dense(hidden) -> relu -> dense(classes).
    ``cnn-2conv``: conv(widths[0], kernel x kernel, same) -> relu -> pool ->
    conv(widths[1]) -> relu -> pool -> flatten -> dense(classes).

    Weights are uniform in +-sqrt(6 / fan_in); biases start at zero.
    """
    rng = np.random.default_rng(seed)
    if arch == "mlp-small":
        shape = tuple(input_shape or (28, 28, 1))
        layers = [Layer("flatten")] if len(shape) > 1 else []
        d = int(np.prod(shape))
        layers += [_dense(rng, d, hidden, dtype), Layer("relu"), _dense(rng, hidden, num_classes, dtype)]
    elif arch == "cnn-2conv":
        shape = tuple(input_shape or (28, 28, 1))
        if len(shape) != 3:
            raise ShapeError(f"cnn-2conv needs (H, W, C) input, got {shape}")
        h, w, c = shape
        c1, c2 = widths
        layers = [
            _conv(rng, kernel, c, c1, dtype), Layer("relu"), Layer("maxpool2"),
            _conv(rng, kernel, c1, c2, dtype), Layer("relu"), Layer("maxpool2"),
            Layer("flatten"),
            _dense(rng, (h // 4) * (w // 4) * c2, num_classes, dtype),
        ]
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    return Model(tuple(layers), shape, num_classes, arch)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class AdversarialConfig:
    """Inner attack used by :func:`adversarial_train`.

    ``ramp_epochs`` > 0 grows the radius (and step size) linearly over the
    first epochs, reaching ``epsilon`` at epoch ``ramp_epochs``; at 0 the full
    radius is used from the start.
    """

    epsilon: float = 0.3
    steps: int = 7
    step_size: float = 0.1
    attack: str = "pgd"  # or "witchcraft"
    pixel_min: float = 0.0
    pixel_max: float = 1.0
    ramp_epochs: int = 0

    def scale(self, epoch: int) -> float:
        return min(1.0, (epoch + 1) / (self.ramp_epochs + 1))

    def __post_init__(self):
        if self.steps < 0 or self.ramp_epochs < 0:
            raise ValueError("steps and ramp_epochs must be >= 0")
        if self.epsilon < 0 or self.step_size <= 0:
            raise ValueError("epsilon must be >= 0 and step_size > 0")
        if self.attack not in ("pgd", "witchcraft"):
            raise ValueError(f"unsupported inner attack {self.attack!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.05
    seed: int = 0
    adversarial: AdversarialConfig | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")


def _check(model: Model, data: LabeledDataset) -> None:
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.images.shape[1:] != model.input_shape:
        raise ShapeError(f"dataset examples {data.images.shape[1:]} do not match model input {model.input_shape}")
    if data.class_count > model.num_classes:
        raise ShapeError(f"dataset has {data.class_count} classes, model {model.num_classes}")


def mean_loss(model: Model, x, y, batch_size: int = 500) -> float:
    total = 0.0
    for s in range(0, len(x), batch_size):
        z = forward(model, np.asarray(x[s : s + batch_size], dtype=model.dtype))
        total += float(T.softmax_cross_entropy(z, np.asarray(y[s : s + batch_size])).data.sum())
    return total / len(x)


def accuracy(model: Model, x, y, batch_size: int = 500) -> float:
    hits = 0
    for s in range(0, len(x), batch_size):
        z = forward(model, np.asarray(x[s : s + batch_size], dtype=model.dtype)).data
        hits += int((np.argmax(z, axis=1) == np.asarray(y[s : s + batch_size])).sum())
    return hits / len(x)


def _sgd(model: Model, data: LabeledDataset, cfg: TrainConfig) -> Model:
    _check(model, data)
    adv = cfg.adversarial
    images = data.images.astype(model.dtype, copy=False)
    labels = data.labels.astype(np.int64)
    params = [p.data.copy() for p in model.parameters()]
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, 0, epoch).permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            tensors = [Tensor._wrap(p) for p in params]
            current = _rebind(model, tensors)
            if adv is not None and adv.steps > 0:
                xb = xb + _craft(current, xb, yb, idx, adv, cfg.seed, epoch)
            with Tape() as tape:
                tape.watch(*tensors)
                loss = T.softmax_cross_entropy(forward(current, xb), yb)
            grads = tape.gradient(loss, tensors, seed=np.full(len(idx), 1.0 / len(idx)))
            losses.append(float(loss.data.mean()))
            params = [p - p.dtype.type(cfg.lr) * g.data for p, g in zip(params, grads)]
        log.info("epoch %d/%d mean loss %.4f", epoch + 1, cfg.epochs, np.mean(losses))
    return _rebind(model, [Tensor._wrap(p) for p in params])


def _rebind(model: Model, tensors: list[Tensor]) -> Model:
    # rebinds parameter tensors without copying or re-validating dtypes
    it = iter(tensors)
    layers = tuple(Layer(l.kind, tuple(next(it) for _ in l.params)) for l in model.layers)
    return Model(layers, model.input_shape, model.num_classes, model.arch)


def _craft(model, xb, yb, idx, adv: AdversarialConfig, seed: int, epoch: int) -> np.ndarray:
    k = adv.scale(epoch)
    budget = PerturbationBudget(adv.epsilon * k, adv.pixel_min, adv.pixel_max)
    if budget.epsilon == 0:
        return np.zeros_like(xb)
    if adv.attack == "witchcraft":
        res = witchcraft(model, xb, yb, budget, adv.step_size * k, adv.steps, early_stop=False,
                         seed=seed, indices=idx, stream=(1, epoch))
    else:
        res = pgd(model, xb, yb, budget, adv.step_size * k, adv.steps,
                  seed=seed, indices=idx, stream=(1, epoch))
    return res.delta


def train_sgd(model: Model, dataset: LabeledDataset, cfg: TrainConfig) -> Model:
    """Plain minibatch SGD on mean cross-entropy (no momentum).

    Shuffling is seeded by ``cfg.seed`` and the epoch number. Any
    ``cfg.adversarial`` setting is ignored here.
    """
    return _sgd(model, dataset, TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed))


def adversarial_train(model: Model, dataset: LabeledDataset, cfg: TrainConfig) -> Model:
    """SGD where each minibatch is replaced by its PGD perturbation first.

    The inner attack is randomly initialised fixed-step PGD by default
    (``cfg.adversarial.attack="witchcraft"`` switches it). With
    ``steps=0`` no perturbation is crafted and the run matches
    :func:`train_sgd` exactly.
    """
    if cfg.adversarial is None:
        cfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed, AdversarialConfig())
    return _sgd(model, dataset, cfg)


# ---------------------------------------------------------------------------
# weight files
#
# little-endian throughout:
#   8s  magic b"WCRFTNN\0"
#   u32 format version
#   u16 arch-name length, utf-8 bytes
#   u32 class count
#   u8  input rank, u32 * rank input dims
#   u32 layer count
#   per layer: u8 kind length, ascii kind, u8 parameter count,
#              per parameter: u8 rank, u32 * rank dims
#              then per parameter: float32 * prod(dims)

MAGIC = b"WCRFTNN\0"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """Malformed, truncated or incompatible weight file."""


def save_weights(model: Model, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    name = model.arch.encode("utf-8")
    out += struct.pack("<H", len(name)) + name
    out += struct.pack("<I", model.num_classes)
    out += struct.pack("<B", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        kind = layer.kind.encode("ascii")
        out += struct.pack("<B", len(kind)) + kind
        out += struct.pack("<B", len(layer.params))
        for p in layer.params:
            out += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        for p in layer.params:
            out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(
                f"truncated weight file: need {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path) -> Model:
    """Read a file written by :func:`save_weights`.

    Layer shapes are checked against the declared input shape before each
    layer's data is read, so an edited shape header is reported against the
    offending layer rather than as garbage further on.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise WeightFormatError("not a weight file (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (n,) = r.unpack("<H", "arch name length")
    try:
        arch = r.take(n, "arch name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WeightFormatError("arch name is not utf-8") from exc
    (num_classes,) = r.unpack("<I", "class count")
    (rank,) = r.unpack("<B", "input rank")
    input_shape = r.unpack(f"<{rank}I", "input shape")
    (n_layers,) = r.unpack("<I", "layer count")
    layers = []
    shape = tuple(input_shape)
    for i in range(n_layers):
        (klen,) = r.unpack("<B", f"layer {i} kind length")
        kind = r.take(klen, f"layer {i} kind").decode("ascii", errors="replace")
        if kind not in LAYER_KINDS:
            raise WeightFormatError(f"layer {i}: unknown kind {kind!r}")
        (n_params,) = r.unpack("<B", f"layer {i} parameter count")
        if n_params != LAYER_KINDS[kind]:
            raise WeightFormatError(f"layer {i} ({kind}): {n_params} parameters, expected {LAYER_KINDS[kind]}")
        dims = []
        for j in range(n_params):
            (prank,) = r.unpack("<B", f"layer {i} parameter {j} rank")
            dims.append(r.unpack(f"<{prank}I", f"layer {i} parameter {j} shape"))
        probe = Layer(kind, tuple(Tensor(np.empty(d, dtype=np.float32)) for d in dims))
        try:
            shape = probe.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({kind}): {exc}") from None
        params = []
        for j, d in enumerate(dims):
            count = int(np.prod(d, dtype=np.int64))
            raw = r.take(4 * count, f"layer {i} parameter {j} data")
            params.append(Tensor(np.frombuffer(raw, dtype="<f4").reshape(d).astype(np.float32)))
        params = tuple(params)
        layers.append(Layer(kind, params))
    if r.pos != len(r.buf):
        raise WeightFormatError(f"{len(r.buf) - r.pos} trailing bytes after last layer")
    if shape != (num_classes,):
        raise ShapeError(f"network output {shape} does not match declared {num_classes} classes")
    return Model(tuple(layers), input_shape, num_classes, arch)
