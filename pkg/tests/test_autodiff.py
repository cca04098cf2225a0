import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustlab import autodiff as ad
from robustlab.autodiff import ShapeError, Tensor


def fd_grad(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        g.flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


UNARY = {
    "exp": (lambda t: t.exp(), lambda a: np.exp(a), (-2, 2)),
    "log": (lambda t: t.log(), lambda a: np.log(a), (0.2, 3)),
    "tanh": (lambda t: t.tanh(), np.tanh, (-2, 2)),
    "sqrt": (lambda t: t.sqrt(), np.sqrt, (0.2, 3)),
    "square": (lambda t: t**2, lambda a: a**2, (-2, 2)),
    "recip": (lambda t: 1.0 / t, lambda a: 1.0 / a, (0.5, 3)),
    "softmax": (lambda t: ad.softmax(t), lambda a: np.exp(a) / np.exp(a).sum(-1, keepdims=True), (-3, 3)),
    "logsumexp": (lambda t: ad.logsumexp(t), lambda a: np.log(np.exp(a).sum(-1, keepdims=True)), (-3, 3)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2**31 - 1))
def test_unary_primitive_matches_finite_differences(name, seed):
    op, ref, (lo, hi) = UNARY[name]
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, (2, 3))
    w = rng.standard_normal(ref(x).shape)
    xt = Tensor(x, requires_grad=True)
    (g,) = ad.grad((op(xt) * Tensor(w)).sum(), [xt])
    fd = fd_grad(lambda a: float((ref(a) * w).sum()), x)
    assert np.allclose(op(Tensor(x)).data, ref(x), rtol=1e-12, atol=1e-12)
    assert np.linalg.norm(g.data - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


@given(seed=st.integers(0, 2**31 - 1))
def test_matmul_broadcast_and_reductions_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    A, B, c = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)

    def f(a, b, cc):
        return ((a @ b + cc) ** 2).mean(axis=0).sum()

    ts = [Tensor(v, requires_grad=True) for v in (A, B, c)]
    grads = ad.grad(f(*ts), ts)
    for k, (v, g) in enumerate(zip((A, B, c), grads)):
        def fk(z, k=k):
            args = [A, B, c]
            args[k] = z
            return float(f(*[Tensor(a) for a in args]).data)
        fd = fd_grad(fk, v)
        assert np.linalg.norm(g.data - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


@given(seed=st.integers(0, 2**31 - 1))
def test_gradient_is_linear_in_the_graph(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 2, 4)
    xt = Tensor(x, requires_grad=True)
    a = (xt.exp() * 2.0).sum()
    b = (xt.log() * xt).sum()
    (ga,) = ad.grad(a, [xt])
    (gb,) = ad.grad(b, [xt])
    (gab,) = ad.grad(a + b, [xt])
    assert np.allclose(gab.data, ga.data + gb.data, rtol=1e-13, atol=1e-13)


@given(seed=st.integers(0, 2**31 - 1))
def test_double_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((3, 4))

    def grad_sq_norm(w):
        x = Tensor(np.linspace(0.1, 0.4, 4).reshape(4, 1), requires_grad=True)
        out = ((Tensor(w) @ x).tanh()).sum()
        (gx,) = ad.grad(out, [x], create_graph=True)
        return (gx * gx).sum()

    Wt = Tensor(W, requires_grad=True)
    x = Tensor(np.linspace(0.1, 0.4, 4).reshape(4, 1), requires_grad=True)
    (gx,) = ad.grad(((Wt @ x).tanh()).sum(), [x], create_graph=True)
    (gW,) = ad.grad((gx * gx).sum(), [Wt])
    fd = fd_grad(lambda w: float(grad_sq_norm(w).data), W)
    assert np.linalg.norm(gW.data - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_trace_visits_each_node_once_in_topological_order():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    z = y + y * x
    out = (z * z).sum()
    order = ad.trace(out)
    ids = [id(n) for n in order]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_relu_at_zero_has_zero_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    (g,) = ad.grad(x.relu().sum(), [x])
    assert g.data.tolist() == [0.0, 0.0, 1.0]


def test_forward_and_backward_are_bitwise_deterministic():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((5, 5))
    runs = []
    for _ in range(2):
        x = Tensor((np.arange(5.0) / 5).reshape(1, 5), requires_grad=True)
        out = ad.log_softmax(x @ Tensor(W)).sum()
        (g,) = ad.grad(out, [x])
        runs.append((out.data.tobytes(), g.data.tobytes()))
    assert runs[0] == runs[1]


def test_no_grad_is_thread_local():
    seen = {}
    barrier = threading.Barrier(2)

    def worker():
        barrier.wait()
        seen["worker"] = ad.is_grad_enabled()

    t = threading.Thread(target=worker)
    t.start()
    with ad.no_grad():
        barrier.wait()
        t.join()
        seen["main"] = ad.is_grad_enabled()
    assert seen == {"worker": True, "main": False}
    assert ad.is_grad_enabled()


def test_no_grad_records_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_broadcast_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_nonscalar_output_needs_cotangent():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.grad(x * 2.0, [x])


def test_unrelated_input_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    u = Tensor(np.ones(2), requires_grad=True)
    gx, gu = ad.grad((x * x).sum(), [x, u])
    assert np.array_equal(gu.data, np.zeros(2))
    assert np.array_equal(gx.data, 2 * np.ones(3))


@given(seed=st.integers(0, 2**31 - 1))
def test_forward_values_are_finite_and_sized(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4)) * 50)
    out = ad.log_softmax(x)
    assert out.size == int(np.prod(out.shape))
    assert np.all(np.isfinite(out.data))
