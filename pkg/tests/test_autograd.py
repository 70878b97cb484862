import math

import numpy as np
import pytest

from icam import autograd as ag
from icam.autograd import Tensor
from icam.errors import ContractError, DimensionError, DomainError, InfeasibleError, NumericError
from icam.params import ParameterStore, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity_zero_and_loop(rng):
    m = rng.standard_normal((3, 3))
    assert np.array_equal(ag.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    assert np.array_equal(ag.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.standard_normal((3, 4)))).data, np.zeros((2, 4)))
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    assert np.abs(ag.matmul(Tensor(a), Tensor(b)).data - loop_matmul(a, b)).max() <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_formulas(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = rng.standard_normal((3, 2))
    ag.backward((ag.matmul(a, b) * Tensor(g)).sum())
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-12)


SCALAR = {
    "exp": math.exp,
    "tanh": math.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + math.exp(-x)),
    "neg": lambda x: -x,
}


@pytest.mark.parametrize("op", sorted(SCALAR))
def test_unary_scalar_loop(op, rng):
    x = rng.standard_normal((3, 3))
    got = ag.elementwise(op, Tensor(x)).data
    want = np.vectorize(SCALAR[op])(x)
    assert np.abs(got - want).max() <= 1e-12


def test_binary_and_log_scalar_loop(rng):
    a, b = rng.random((3, 3)) + 0.5, rng.random((3, 3)) + 0.5
    for op, f in [("add", float.__add__), ("sub", float.__sub__), ("mul", float.__mul__), ("div", float.__truediv__)]:
        got = ag.elementwise(op, Tensor(a), Tensor(b)).data
        want = np.array([[f(float(a[i, j]), float(b[i, j])) for j in range(3)] for i in range(3)])
        assert np.abs(got - want).max() <= 1e-12
    assert np.abs(ag.log(Tensor(a)).data - np.vectorize(math.log)(a)).max() <= 1e-12


def test_point_values():
    assert ag.sigmoid(Tensor(0.0)).item() == 0.5
    assert ag.tanh(Tensor(0.0)).item() == 0.0


def test_domain_errors():
    with pytest.raises(DomainError):
        ag.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ag.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(DimensionError):
        ag.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_nan_is_surfaced():
    with pytest.raises(NumericError):
        ag.exp(Tensor([1000.0]))


def test_scalar_broadcast(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    s = Tensor(2.0, requires_grad=True)
    ag.backward((x * s).sum())
    assert np.allclose(x.grad, 2.0)
    assert np.isclose(s.grad, x.data.sum())


def test_softmax_masked_examples():
    assert np.allclose(ag.softmax_masked(Tensor([0.0, 0.0, 0.0]), np.zeros(3, bool)).data, 1 / 3, atol=1e-15)
    assert ag.softmax_masked(Tensor([5.0, 1.0]), np.array([False, True])).data.tolist() == [1.0, 0.0]
    x = np.array([1.0, 2.0, 3.0])
    direct = np.array([math.exp(v - 3.0) for v in x])
    assert np.abs(ag.softmax_masked(Tensor(x), np.zeros(3, bool)).data - direct / direct.sum()).max() <= 1e-15
    with pytest.raises(InfeasibleError):
        ag.softmax_masked(Tensor([1.0, 2.0]), np.array([True, True]))


def test_softmax_is_probability_vector(rng):
    for _ in range(200):
        n = int(rng.integers(1, 9))
        mask = rng.random(n) < 0.4
        mask[rng.integers(n)] = False
        p = ag.softmax_masked(Tensor(rng.standard_normal(n) * 10), mask).data
        assert np.all(p >= 0) and np.all(p[mask] == 0.0)
        assert abs(p.sum() - 1.0) <= 1e-12


def test_instance_norm_examples(rng):
    z = ag.instance_norm(Tensor(np.array([[3.0], [3.0], [3.0]]))).data
    assert np.array_equal(z, np.zeros((3, 1)))
    z = ag.instance_norm(Tensor(np.array([[-1.0], [1.0]]))).data
    assert np.allclose(z[:, 0], np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5), atol=1e-15)
    z = ag.instance_norm(Tensor(rng.standard_normal((5, 4)) * 3 + 2)).data
    assert np.abs(z.mean(axis=0)).max() <= 1e-6
    assert np.abs(z.var(axis=0) - 1).max() <= 1e-4


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ag.backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0]
    x = Tensor([1.0, 2.0], requires_grad=True)
    ag.backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_two_consumers_accumulate(rng):
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    ag.backward(x.sum() + (x * x).sum())
    assert np.allclose(x.grad, 1 + 2 * x.data, atol=1e-14)


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ag.backward((x * x).sum())
    ag.backward((x * x).sum())
    assert x.grad.tolist() == [4.0, 8.0]


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ag.backward(x * x)


def test_grad_check_examples(rng):
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    assert ag.grad_check(lambda t: t.sum(), x) <= 1e-10
    x = Tensor(rng.standard_normal((4,)), requires_grad=True)
    assert ag.grad_check(lambda t: ag.sigmoid(t.sum()), x) <= 1e-6


def _fd(f, shape, rng, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    t = Tensor(x, requires_grad=True)
    return ag.grad_check(f, t)


@pytest.mark.parametrize("name,f,pos", [
    ("exp", lambda t: (ag.exp(t) * ag.exp(t)).sum(), False),
    ("log", lambda t: (ag.log(t) * ag.log(t)).sum(), True),
    ("sigmoid", lambda t: (ag.sigmoid(t) * ag.sigmoid(t)).sum(), False),
    ("tanh", lambda t: (ag.tanh(t) * ag.tanh(t)).sum(), False),
    ("div", lambda t: (Tensor(1.0) / t).sum(), True),
    ("relu", lambda t: (ag.relu(t) * ag.relu(t)).sum(), False),
    ("instance_norm", lambda t: (ag.instance_norm(t) * Tensor(np.arange(t.data.size, dtype=float).reshape(t.shape))).sum(), False),
    ("softmax", lambda t: (ag.softmax_masked(t, np.eye(*t.shape, dtype=bool)) * Tensor(np.arange(t.data.size, dtype=float).reshape(t.shape))).sum(), False),
    ("log_softmax", lambda t: (ag.log_softmax_masked(t, np.eye(*t.shape, dtype=bool)) * Tensor(np.arange(t.data.size, dtype=float).reshape(t.shape))).sum(), False),
    ("matmul", lambda t: (ag.matmul(t, ag.swapaxes(t)) * ag.matmul(t, ag.swapaxes(t))).sum(), False),
])
def test_op_gradients_match_fd(name, f, pos, rng):
    for shape in [(2, 3), (5, 4), (8, 8)]:
        assert _fd(f, shape, rng, pos) <= 1e-4, (name, shape)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ag.no_grad():
        y = x * x
    assert not y.requires_grad


# ---------------------------------------------------------------- parameter store / checkpoints

def test_store_order_and_version():
    s = ParameterStore()
    s.add("b", np.ones(2))
    s.add("a", np.zeros((2, 2)))
    s.add("c", np.array(1.5))
    assert s.names() == ["b", "a", "c"]
    assert s["c"].shape == ()
    assert s.version >= 3
    with pytest.raises(ContractError):
        s.add("a", np.zeros(1))


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    arrays = {"encoder.layer0.aafm.wq.w": rng.standard_normal((3, 4)), "alpha": np.array(0.7), "v": rng.standard_normal(5)}
    path = tmp_path / "m.bin"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == np.float64 and back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    blob = path.read_bytes()
    assert blob[:4] == b"ICAM"
    assert int.from_bytes(blob[4:8], "little") == 1 and int.from_bytes(blob[8:12], "little") == 3


def test_checkpoint_float32(rng):
    arrays = {"w": rng.standard_normal((2, 2))}
    back = decode_checkpoint(encode_checkpoint(arrays, dtype=np.float32))
    assert back["w"].dtype == np.float32
    assert np.array_equal(back["w"], arrays["w"].astype(np.float32))


def test_checkpoint_rejects_garbage():
    with pytest.raises(Exception):
        decode_checkpoint(b"NOPE" + bytes(8))


def test_instance_norm_overflow_is_surfaced():
    with pytest.raises(NumericError):
        ag.instance_norm(Tensor(np.array([[1e200], [-1e200]])))
