"""Immutable numpy-backed tensors and a small reverse-mode tape.

The op set is deliberately closed: dense, 2-D convolution (stride 1,
``"same"`` or ``"valid"`` zero padding), ReLU, 2x2 max-pool, flatten and
softmax cross-entropy, plus the two elementwise helpers the attacks need
(:func:`sign` and :func:`hadamard`). Images are laid out NHWC.

Usage::

    with Tape() as tape:
        tape.watch(x)
        loss = softmax_cross_entropy(dense(x, w, b), labels)
    (gx,) = tape.gradient(loss, [x])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "as_tensor",
    "sign",
    "hadamard",
    "dense",
    "conv2d",
    "relu",
    "max_pool2x2",
    "flatten",
    "softmax_cross_entropy",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class Tensor:
    """Dense n-dimensional array with a read-only buffer."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        return t

    def __reduce__(self):
        # unpickled arrays come back writable; rewrap to restore the guarantee
        return (Tensor._wrap, (self.data.copy(),))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # (upstream grad, which inputs need a grad) -> per-input grads
    backward: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]]


_TAPES: list["Tape"] = []


class Tape:
    """Records differentiable ops applied to watched tensors.

    Only ops with at least one tracked input are recorded, so evaluating a
    model without watching anything costs nothing extra. ``gradient`` replays
    the records in exact reverse order of recording.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, op, inputs, output, backward) -> None:
        self.records.append(_Record(op, tuple(inputs), output, backward))
        self._tracked[id(output)] = output

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[Tensor]:
        """Vector-Jacobian product of ``target`` w.r.t. each source.

        ``seed`` defaults to ones, i.e. the gradient of ``sum(target)``.
        Untouched sources receive zeros of their own shape.
        """
        if seed is None:
            seed = np.ones_like(target.data)
        seed = np.asarray(seed, dtype=target.dtype)
        if seed.shape != target.shape:
            raise ShapeError(f"seed shape {seed.shape} != target shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): seed}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            needs = tuple(id(inp) in self._tracked for inp in rec.inputs)
            for inp, gi in zip(rec.inputs, rec.backward(g, needs)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = np.zeros_like(s.data)
            out.append(Tensor._wrap(np.ascontiguousarray(g, dtype=s.dtype)))
        return out


def _active_tape(*inputs: Tensor) -> Tape | None:
    for tape in reversed(_TAPES):
        if any(tape.is_tracked(t) for t in inputs):
            return tape
    return None


def _emit(op, inputs, out_arr, backward) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _active_tape(*inputs)
    if tape is not None:
        tape._record(op, inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise helpers


def sign(t) -> Tensor:
    """Elementwise sign with ``sign(0) == 0``. Not differentiated."""
    t = as_tensor(t)
    return Tensor._wrap(np.sign(t.data))


def hadamard(a, b) -> Tensor:
    """Coordinate-wise product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("hadamard", (a, b), ad * bd, lambda g, needs: (g * bd, g * ad))


# ---------------------------------------------------------------------------
# layers


def dense(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape (batch, in)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data

    def backward(g, needs):
        gx = g @ wd.T if needs[0] else None
        gw = xd.T @ g if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _emit("dense", (x, w, b), xd @ wd + b.data, backward)


def _pad_amount(kernel: int, padding: str) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if kernel % 2 != 1:
            raise ShapeError("'same' padding needs an odd kernel")
        return (kernel - 1) // 2
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (n, ho, wo, c, kh, kw) window view -> rows ordered (kh, kw, c)
    n, hp, wp, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n * (hp - kh + 1) * (wp - kw + 1), kh * kw * c)


def _conv_input_grad(g, wd, x_shape, ph, pw, method=None):
    kh, kw, cin, cout = wd.shape
    n, ho, wo, _ = g.shape
    if method is None:
        # scatter-add is cheaper when few input channels fan out to many outputs
        method = "scatter" if 4 * cin <= cout else "flip"
    if method == "flip":
        qh, qw = kh - 1 - ph, kw - 1 - pw
        gp = np.pad(g, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
        flipped = wd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
        return (_im2col(gp, kh, kw) @ flipped).reshape(x_shape)
    gcols = (g.reshape(-1, cout) @ wd.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    gxp = np.zeros((n, ho + kh - 1, wo + kw - 1, cin), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + ho, j : j + wo, :] += gcols[:, :, :, i, j, :]
    return gxp[:, ph : ph + x_shape[1], pw : pw + x_shape[2], :]


def conv2d(x, w, b, padding: str = "same") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation), NHWC layout.

    ``w`` has shape (kh, kw, c_in, c_out). Implemented with im2col. The input
    gradient is either the full correlation of the upstream gradient with the
    flipped kernel or a scatter-add of column gradients, whichever moves
    less memory for the channel counts at hand.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: x{x.shape} w{w.shape} b{b.shape}")
    kh, kw, cin, cout = w.shape
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    n, hp, wp, _ = xd.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {x.shape[1:3]}")
    cols = _im2col(xd, kh, kw)
    wd = w.data
    out = (cols @ wd.reshape(kh * kw * cin, cout)).reshape(n, ho, wo, cout) + b.data

    def backward(g, needs):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(kh, kw, cin, cout) if needs[1] else None
        gb = g2.sum(axis=0) if needs[2] else None
        gx = _conv_input_grad(g, wd, x.shape, ph, pw) if needs[0] else None
        return gx, gw, gb

    return _emit("conv2d", (x, w, b), out, backward)


def relu(x) -> Tensor:
    # subgradient at 0 is 0
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.maximum(x.data, 0), lambda g, needs: (g * mask,))


def max_pool2x2(x) -> Tensor:
    """Non-overlapping 2x2 max-pool; ties route the gradient to the first maximum
    in (top-left, top-right, bottom-left, bottom-right) order."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"max_pool2x2 needs NHWC with even H, W; got {x.shape}")
    xd = x.data
    corners = [xd[:, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def backward(g, needs):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), c in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = (c == out) & ~taken
            taken |= hit
            gx[:, i::2, j::2] = g * hit
        return (gx,)

    return _emit("max_pool2x2", (x,), out, backward)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit("flatten", (x,), x.data.reshape(shape[0], -1), lambda g, needs: (g.reshape(shape),))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-example cross-entropy of softmax(logits) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits{logits.shape} labels{labels.shape}")
    k = logits.shape[1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must be integers in [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = logsumexp - shifted[rows, labels]

    def backward(g, needs):
        p = np.exp(shifted - logsumexp[:, None])
        p[rows, labels] -= 1
        return (p * g[:, None],)

    return _emit("softmax_cross_entropy", (logits,), loss, backward)
