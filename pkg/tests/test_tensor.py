import io
import math
import threading
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from co4 import tensor as T
from co4.errors import ConfigError, FormatError, NumericError, ShapeError
from co4.tensor import Tensor

from gradcheck import check

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_elementwise_basics():
    np.testing.assert_array_equal(T.mul(Tensor([1, 2, 3]), Tensor([4, 5, 6])).data, [4, 10, 18])
    np.testing.assert_array_equal(T.add(Tensor([0, 0]), 5).data, [5, 5])
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert not T.mul(x, T.zeros_like(x)).data.any()


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@given(hnp.arrays(np.float64, (3, 4), elements=finite), hnp.arrays(np.float64, (4,), elements=finite))
def test_broadcast_equals_tile(a, b):
    got = T.mul(Tensor(a), Tensor(b)).data
    assert np.array_equal(got, a * np.tile(b, (3, 1)))


def test_matmul_examples():
    m = np.array([[1.5, -2.0], [0.25, 3.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_schoolbook():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ref = [[sum(a[i, k] * b[k, j] for k in range(3)) for j in range(3)] for i in range(3)]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_relu_alpha():
    assert T.relu_alpha(Tensor(7.0), 6).item() == 6
    assert T.relu_alpha(Tensor(-3.0), 6).item() == 0
    assert T.relu_alpha(Tensor(2.5), 6).item() == 2.5
    with pytest.raises(ConfigError):
        T.relu_alpha(Tensor(1.0), 0)


@given(hnp.arrays(np.float64, 8, elements=finite), st.floats(1e-3, 100))
def test_relu_alpha_range(x, alpha):
    y = T.relu_alpha(Tensor(x), alpha).data
    assert np.all((0 <= y) & (y <= alpha))


def test_relu_alpha_kink_gradient_is_zero():
    x = Tensor([0.0, 6.0, 3.0, -1.0, 7.0], requires_grad=True)
    with T.Tape():
        T.backward(T.tsum(T.relu_alpha(x, 6.0)))
    assert x.grad.tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    with T.Tape():
        T.backward(T.tsum(x * x + c))
    assert x.grad.tolist() == [2.0, 4.0]
    assert c.grad is None


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape(), pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_softmax_and_losses():
    np.testing.assert_allclose(T.softmax_rows(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    ce = T.cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 9, 2]))
    assert abs(ce.item() - math.log(10)) < 1e-12
    assert np.allclose(T.mean_pool(Tensor(np.full((2, 5, 3), 1.25))).data, 1.25)
    rows = T.softmax_rows(Tensor(np.random.default_rng(0).normal(0, 30, (50, 7)))).data
    assert np.all(np.abs(rows.sum(-1) - 1) < 1e-9)


def test_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_debug_sentinel():
    T.set_debug(True)
    try:
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            T.exp(Tensor([1000.0]))
    finally:
        T.set_debug(False)


def test_tape_ids_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.tanh(x * 2.0) + x
        T.backward(T.tsum(y))
    for nid, node in enumerate(tape.nodes):
        assert all(i < nid for i in node.inputs)


def test_replay_deterministic():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 4)))
        with T.Tape():
            loss = T.tsum(T.gelu(T.matmul(x, w)) ** 2)
            T.backward(loss)
        return loss.item(), w.grad.tobytes()

    assert run() == run()


def test_tapes_are_thread_local():
    out = {}

    def work(k):
        x = Tensor(np.full(3, float(k)), requires_grad=True)
        with T.Tape():
            T.backward(T.tsum(x * x))
        out[k] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        assert out[k].tolist() == [2.0 * k] * 3


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_activations_freed_by_refcount():
    import gc
    import weakref

    gc.disable()
    try:
        x = Tensor(np.ones((64, 64)), requires_grad=True)
        with T.Tape() as tape:
            h = T.tanh(x * 2.0)
            T.backward(T.tsum(h))
        refs = [weakref.ref(h), weakref.ref(tape)]
        del h, tape, x
        assert all(r() is None for r in refs)
    finally:
        gc.enable()


# ---------------------------------------------------------------------------
# gradients against finite differences


def _kink_free(rng, shape, kinks=(), gap=1e-3):
    x = rng.uniform(-2, 2, shape)
    for k in kinks:
        bad = np.abs(x - k) < gap
        x[bad] += 4 * gap
    return x


UNARY = {
    "neg": (T.neg, ()),
    "abs": (T.absolute, (0.0,)),
    "square": (T.square, ()),
    "power3": (lambda x: T.power(x, 3.0), ()),
    "exp": (T.exp, ()),
    "tanh": (T.tanh, ()),
    "gelu": (T.gelu, ()),
    "relu6": (lambda x: T.relu_alpha(x * 4.0, 6.0), (0.0, 1.5)),
    "clip": (lambda x: T.clip(x, -1.0, 1.0), (-1.0, 1.0)),
    "softmax": (lambda x: T.softmax_rows(x) * Tensor(np.arange(1.0, 5.0)), ()),
    "log_softmax": (lambda x: T.log_softmax(x) * Tensor(np.arange(1.0, 5.0)), ()),
    "mean": (lambda x: T.tmean(x * x, axis=0), ()),
    "mean_pool": (lambda x: T.mean_pool(x.reshape(1, 3, 4) ** 2), ()),
    "transpose": (lambda x: T.transpose(x) * Tensor(np.arange(12.0).reshape(4, 3)), ()),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grads(name):
    fn, kinks = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        assert check(fn, [_kink_free(rng, (3, 4), kinks)]) < 1e-5


def test_positive_domain_grads():
    rng = np.random.default_rng(0)
    for fn in (T.log, T.sqrt):
        assert check(fn, [rng.uniform(0.2, 2, (3, 4))]) < 1e-5


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_grads_with_broadcast(op):
    rng = np.random.default_rng(3)
    a = rng.uniform(-2, 2, (2, 3, 4))
    b = rng.uniform(0.5, 2, (3, 1))
    assert check(lambda x, y: T.elementwise(op, x, y), [a, b]) < 1e-5


def test_structural_grads():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 5))
    assert check(T.matmul, [a, b]) < 1e-5
    idx = np.array([[2, 0], [1, 1]])
    assert check(lambda x: T.gather_rows(x, idx) ** 2, [a]) < 1e-5
    assert check(lambda x, y: T.concat([x, y * 2.0], axis=-1) ** 2, [a, rng.uniform(-2, 2, (2, 3, 2))]) < 1e-5
    g, be = rng.uniform(0.5, 2, 4), rng.uniform(-1, 1, 4)
    assert check(lambda x, gm, bt: T.layer_norm(x, gm, bt) * Tensor(np.arange(4.0)), [a, g, be]) < 1e-5
    labels = np.array([0, 2, 1])
    assert check(lambda z: T.cross_entropy(z, labels), [rng.uniform(-2, 2, (3, 4))]) < 1e-5


# ---------------------------------------------------------------------------
# serialisation


def test_save_load_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(2, 3, 5))
    T.save_tensor(tmp_path / "a.co4t", arr)
    assert np.array_equal(T.load_tensor(tmp_path / "a.co4t").data, arr)
    raw = (tmp_path / "a.co4t").read_bytes()
    assert raw[:4] == b"CO4T"
    assert int.from_bytes(raw[4:8], "little") == 3


def test_load_rejects_bad_files():
    with pytest.raises(FormatError, match="byte 0"):
        T.load_tensor(io.BytesIO(b"XXXX\x01\x00\x00\x00"))
    buf = io.BytesIO()
    T.save_tensor(buf, np.ones(4))
    with pytest.raises(FormatError, match="expected 32"):
        T.load_tensor(io.BytesIO(buf.getvalue()[:-3]))
