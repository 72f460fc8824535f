import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from witchcraft import tensor as T
from witchcraft.models import build_model
from witchcraft.network import forward, grad_input
from witchcraft.tensor import ShapeError, Tape, Tensor, hadamard, sign

from helpers import binary_logistic, linear_model

finite = st.floats(-1e6, 1e6, allow_nan=False)


def central_difference(f, x, h=1e-4):
    """Gradient of scalar f at x by central differences, one coordinate at a time."""
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# -- sign / hadamard ---------------------------------------------------------


def test_sign_examples():
    assert sign([-2.0, 0.5, 0.0]).data.tolist() == [-1.0, 1.0, 0.0]
    assert np.array_equal(sign(np.zeros((2, 3))).data, np.zeros((2, 3)))


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_sign_idempotent_and_ternary(x):
    s = sign(x).data
    assert set(np.unique(s)) <= {-1.0, 0.0, 1.0}
    assert np.array_equal(sign(s).data, s)
    assert s.shape == x.shape


def test_hadamard_examples():
    assert hadamard([1, 2, 3], [4, 5, 6]).data.tolist() == [4, 10, 18]
    t = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(hadamard(t, np.ones_like(t)).data, t)
    assert np.array_equal(hadamard(t, np.zeros_like(t)).data, np.zeros_like(t))


def test_hadamard_shape_mismatch():
    with pytest.raises(ShapeError):
        hadamard(np.ones(3), np.ones(4))


@given(st.integers(1, 10).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                       arrays(np.float64, n, elements=finite))))
def test_hadamard_commutes(ab):
    a, b = ab
    assert np.array_equal(hadamard(a, b).data, hadamard(b, a).data)


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# -- per-op gradient checks ----------------------------------------------------


def _check_op(fn, *shapes, rng, wrt=0):
    args = [rng.uniform(-1, 1, s) for s in shapes]
    seed = rng.uniform(-1, 1, np.shape(fn(*[Tensor(a) for a in args]).data))

    def scalar(v):
        a = list(args)
        a[wrt] = v
        return float((fn(*[Tensor(x) for x in a]).data * seed).sum())

    tensors = [Tensor(a) for a in args]
    with Tape() as tape:
        tape.watch(*tensors)
        out = fn(*tensors)
    got = tape.gradient(out, [tensors[wrt]], seed=seed)[0].data
    want = central_difference(scalar, args[wrt])
    assert got.shape == args[wrt].shape
    assert rel_err(got, want) <= 1e-4


@pytest.mark.parametrize("wrt", [0, 1, 2])
def test_dense_grad(rng, wrt):
    _check_op(T.dense, (3, 4), (4, 5), (5,), rng=rng, wrt=wrt)


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("wrt", [0, 1, 2])
def test_conv_grad(rng, padding, wrt):
    _check_op(lambda x, w, b: T.conv2d(x, w, b, padding), (2, 6, 5, 3), (3, 3, 3, 4), (4,), rng=rng, wrt=wrt)


@pytest.mark.parametrize("method", ["flip", "scatter"])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_input_grad_paths_agree(rng, method, padding):
    g = rng.standard_normal((2, 6, 6, 4)) if padding == "same" else rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((3, 3, 2, 4))
    p = 1 if padding == "same" else 0
    ref = T._conv_input_grad(g, w, (2, 6, 6, 2), p, p, method="flip")
    got = T._conv_input_grad(g, w, (2, 6, 6, 2), p, p, method=method)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_relu_grad(rng):
    _check_op(T.relu, (4, 7), rng=rng)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0])
    with Tape() as tape:
        tape.watch(x)
        y = T.relu(x)
    assert tape.gradient(y, [x])[0].data.tolist() == [0.0, 1.0, 0.0]


def test_maxpool_grad(rng):
    _check_op(T.max_pool2x2, (2, 4, 6, 3), rng=rng)


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((1, 2, 2, 1)))
    with Tape() as tape:
        tape.watch(x)
        y = T.max_pool2x2(x)
    g = tape.gradient(y, [x])[0].data
    assert g[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_softmax_xent_grad(rng):
    labels = np.array([0, 2, 1])
    _check_op(lambda z: T.softmax_cross_entropy(z, labels), (3, 4), rng=rng)


def test_softmax_xent_is_stable_for_large_logits():
    loss = T.softmax_cross_entropy([[1000.0, 0.0], [0.0, 1000.0]], [0, 0]).data
    assert np.all(np.isfinite(loss))
    np.testing.assert_allclose(loss, [0.0, 1000.0])


def test_flatten_roundtrip(rng):
    _check_op(T.flatten, (2, 3, 2, 2), rng=rng)


def test_backward_replays_in_reverse_order():
    x = Tensor(np.ones((1, 2)))
    w = Tensor(np.eye(2))
    b = Tensor(np.zeros(2))
    with Tape() as tape:
        tape.watch(x)
        h = T.relu(T.dense(x, w, b))
        T.softmax_cross_entropy(h, [0])
    assert [r.op for r in tape.records] == ["dense", "relu", "softmax_cross_entropy"]


def test_unwatched_ops_are_not_recorded():
    with Tape() as tape:
        T.relu(Tensor([1.0, -1.0]))
    assert tape.records == []


# -- forward / grad_input -------------------------------------------------------


def test_identity_dense_forward():
    m = linear_model(np.eye(2))
    assert forward(m, [[1.0, 2.0]]).data.tolist() == [[1.0, 2.0]]


def test_two_layer_mlp_by_hand():
    from witchcraft.network import Layer, Model

    w1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.5, -1.0])
    w2 = np.array([[1.0, 0.0, -1.0], [2.0, 1.0, 0.0]])
    b2 = np.array([0.0, 0.1, 0.2])
    m = Model(
        (Layer("dense", (Tensor(w1), Tensor(b1))), Layer("relu"), Layer("dense", (Tensor(w2), Tensor(b2)))),
        (2,), 3,
    )
    # x = (1, 1): pre = (1+2+0.5, -1+0.5-1) = (3.5, -1.5); relu -> (3.5, 0)
    # logits = (3.5, 0.1, -3.5 + 0.2)
    np.testing.assert_allclose(forward(m, [[1.0, 1.0]]).data, [[3.5, 0.1, -3.3]])


def test_zero_weight_model_gives_zero_logits(rng):
    m = build_model("cnn-2conv", 0, widths=(2, 3), input_shape=(8, 8, 1))
    m = m.with_parameters([np.zeros(p.shape, np.float32) for p in m.parameters()])
    x = rng.random((3, 8, 8, 1))
    assert np.array_equal(forward(m, x).data, np.zeros((3, 10)))
    assert np.array_equal(grad_input(m, x, [1, 2, 3]), np.zeros_like(x))


def test_forward_rejects_wrong_shape():
    m = linear_model(np.eye(2))
    with pytest.raises(ShapeError):
        forward(m, np.ones((1, 3)))


def test_logistic_input_gradient_closed_form():
    w = np.array([1.0, -2.0])
    m = binary_logistic(w)
    g = grad_input(m, np.zeros(2), 0)
    # d/dx -log sigmoid(w.x) = (sigmoid(w.x) - 1) w
    np.testing.assert_allclose(g, (0.5 - 1.0) * w, rtol=1e-15)


def test_grad_input_rejects_bad_label():
    m = linear_model(np.eye(2))
    with pytest.raises(ValueError):
        grad_input(m, np.zeros(2), 2)


@pytest.mark.parametrize("arch", ["mlp-small", "cnn-2conv"])
def test_grad_input_matches_finite_differences(rng, arch):
    m = build_model(arch, 3, input_shape=(8, 8, 2), widths=(3, 4), hidden=8, num_classes=4, dtype=np.float64)
    x = rng.uniform(-1, 1, (2, 8, 8, 2))
    y = np.array([1, 3])
    got = grad_input(m, x, y)
    want = central_difference(lambda v: T.softmax_cross_entropy(forward(m, v), y).data.sum(), x)
    assert rel_err(got, want) <= 1e-4


def test_forward_is_bit_deterministic(rng):
    m = build_model("cnn-2conv", 1)
    x = rng.random((4, 28, 28, 1)).astype(np.float32)
    assert np.array_equal(forward(m, x).data, forward(m, x.copy()).data)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1, 1)))
def test_outputs_finite(x):
    m = build_model("mlp-small", 0, input_shape=(5,), num_classes=3, dtype=np.float64)
    assert np.all(np.isfinite(grad_input(m, x, [0, 1, 2])))
