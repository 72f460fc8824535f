"""
Gradients of a small network
============================

Every attack in the package needs one thing from the model: the gradient of
the loss with respect to the input. This script builds a small CNN, asks the
tape for that gradient, and checks it against central differences.
"""

import numpy as np

from witchcraft import tensor as T
from witchcraft.models import build_model
from witchcraft.network import forward, grad_input

# Float64 keeps finite differences accurate to many digits.
model = build_model("cnn-2conv", seed=0, input_shape=(8, 8, 1), widths=(4, 8), num_classes=3, dtype=np.float64)
rng = np.random.default_rng(0)
x = rng.random((1, 8, 8, 1))
y = np.array([2])

g = grad_input(model, x, y)
print("gradient shape:", g.shape)

# Central differences, one pixel at a time.
def loss(v):
    return float(T.softmax_cross_entropy(forward(model, v), y).data.sum())

h = 1e-5
fd = np.zeros_like(x)
for i in np.ndindex(x.shape):
    e = np.zeros_like(x)
    e[i] = h
    fd[i] = (loss(x + e) - loss(x - e)) / (2 * h)

print("relative error: %.2e" % (np.linalg.norm(g - fd) / np.linalg.norm(fd)))

# The same machinery is available directly through a Tape.
w = T.Tensor([[1.0, -2.0], [0.5, 0.0]])
v = T.Tensor([[0.3, 0.7]])
with T.Tape() as tape:
    tape.watch(v)
    out = T.softmax_cross_entropy(T.dense(v, w, T.Tensor([0.0, 0.0])), np.array([0]))
(dv,) = tape.gradient(out, [v])
print("hand-sized example, d loss / d input:", dv.data)
