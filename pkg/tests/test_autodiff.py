import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ergl import autodiff as ad
from ergl.autodiff import Tensor, grad_check
from ergl.exceptions import ContractError, DimensionError


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def check(f, params, tol=1e-4):
    report = grad_check(f, params, eps=1e-5, tol=tol)
    assert report.passed, report.failures()


# -- per-op finite-difference checks -----------------------------------------

UNARY = {
    "neg": lambda a: ad.neg(a),
    "exp": lambda a: ad.exp(a),
    "log": lambda a: ad.log(a),
    "sqrt": lambda a: ad.sqrt(a),
    "relu": lambda a: ad.relu(a),
    "sigmoid": lambda a: ad.sigmoid(a),
    "tanh": lambda a: ad.tanh(a),
    "power": lambda a: ad.power(a, 3),
    "softmax": lambda a: ad.softmax(a, axis=-1),
    "log_softmax": lambda a: ad.log_softmax(a, axis=0),
    "sum_axis": lambda a: ad.sum(a, axis=1, keepdims=True),
    "mean_axis": lambda a: ad.mean(a, axis=0),
    "max_axis": lambda a: ad.max(a, axis=1),
    "reshape": lambda a: ad.reshape(a, (4, 3)),
    "transpose": lambda a: ad.transpose(a, (1, 0)),
    "swapaxes": lambda a: ad.swapaxes(a, 0, 1),
    "expand_dims": lambda a: ad.expand_dims(a, 1),
    "broadcast_to": lambda a: ad.broadcast_to(a, (2, 3, 4)),
    "getitem": lambda a: ad.getitem(a, (slice(None), [0, 2, 2])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng, f64):
    a = leaf(rng, 3, 4, positive=name in ("log", "sqrt"))
    if name == "relu":
        a.data[np.abs(a.data) < 1e-3] = 0.5  # keep away from the kink
    w = rng.normal(size=UNARY[name](Tensor(a.data)).shape)
    check(lambda: ad.sum(UNARY[name](a) * w), {"a": a})


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((3, 1), (1, 5))])
def test_binary_broadcast_gradients(name, shapes, rng, f64):
    a = leaf(rng, *shapes[0])
    b = leaf(rng, *shapes[1], positive=name == "div")
    out_shape = np.broadcast_shapes(*shapes)
    w = rng.normal(size=out_shape)
    check(lambda: ad.sum(BINARY[name](a, b) * w), {"a": a, "b": b})


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 1, 3, 4), (5, 4, 2))])
def test_matmul_gradients(shapes, rng, f64):
    a, b = leaf(rng, *shapes[0]), leaf(rng, *shapes[1])
    w = rng.normal(size=np.matmul(a.data, b.data).shape)
    check(lambda: ad.sum(ad.matmul(a, b) * w), {"a": a, "b": b})


def test_concat_stack_gradients(rng, f64):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    w1, w2 = rng.normal(size=(4, 3)), rng.normal(size=(2, 2, 3))
    check(lambda: ad.sum(ad.concat([a, b], axis=0) * w1) + ad.sum(ad.stack([a, b], axis=1) * w2),
          {"a": a, "b": b})


def test_conv2d_gradients(rng, f64):
    x, k, b = leaf(rng, 2, 3, 5, 4), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    w = rng.normal(size=(2, 4, 5, 4))
    check(lambda: ad.sum(ad.conv2d(x, k, b) * w), {"x": x, "k": k, "b": b})


@pytest.mark.parametrize("pool", ["avg", "max"])
def test_pool_gradients(pool, rng, f64):
    x = leaf(rng, 2, 2, 5, 6)
    fn = ad.avg_pool2d if pool == "avg" else ad.max_pool2d
    w = rng.normal(size=(2, 2, 2, 3))
    check(lambda: ad.sum(fn(x, 2) * w), {"x": x})


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training, rng, f64):
    x, g, b = leaf(rng, 4, 3, 2), leaf(rng, 3), leaf(rng, 3)
    rm, rv = rng.normal(size=3), np.abs(rng.normal(size=3)) + 0.5
    w = rng.normal(size=(4, 3, 2))
    check(lambda: ad.sum(ad.batch_norm(x, g, b, None if training else rm, None if training else rv,
                                       training=training, axis=1) * w),
          {"x": x, "gamma": g, "beta": b})


# -- forward oracles -------------------------------------------------------

def conv_loop(x, k, pad=1):
    B, C, H, W = x.shape
    O = k.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((B, O, H, W))
    for b in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    out[b, o, i, j] = np.sum(xp[b, :, i:i + 3, j:j + 3] * k[o])
    return out


def test_conv2d_matches_loop(rng, f64):
    x, k = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(k)).data, conv_loop(x, k), atol=1e-12)


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(3, 5, 3, 3))))


def test_pools_drop_odd_remainder(rng, f64):
    x = rng.normal(size=(1, 1, 5, 7))
    avg = ad.avg_pool2d(Tensor(x), 2).data
    mx = ad.max_pool2d(Tensor(x), 2).data
    assert avg.shape == mx.shape == (1, 1, 2, 3)
    assert avg[0, 0, 1, 2] == pytest.approx(x[0, 0, 2:4, 4:6].mean())
    assert mx[0, 0, 0, 1] == x[0, 0, 0:2, 2:4].max()


def test_batch_norm_running_stats_update(rng, f64):
    x = rng.normal(loc=3.0, size=(8, 2))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, axis=1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batch_norm_needs_two_values(rng):
    with pytest.raises(ContractError):
        ad.batch_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                      None, None, training=True, axis=1)


def test_softmax_stable_for_large_inputs(f64):
    s = ad.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]])), axis=-1).data
    np.testing.assert_allclose(s, [[0.5, 0.5, 0.0]])


def test_max_splits_ties(f64):
    a = Tensor(np.array([[2.0, 2.0, 1.0]]), requires_grad=True)
    ad.backward(ad.sum(ad.max(a, axis=1)))
    np.testing.assert_allclose(a.grad, [[0.5, 0.5, 0.0]])


# -- tape semantics --------------------------------------------------------

def test_shared_input_accumulates(f64):
    a = Tensor(np.array([3.0]), requires_grad=True)
    ad.backward(ad.sum(a * a + a))
    np.testing.assert_allclose(a.grad, [7.0])


def test_second_backward_on_consumed_tape_raises(f64):
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = ad.sum(a * a)
    ad.backward(loss)
    with pytest.raises(ContractError, match="consumed"):
        ad.backward(loss)


def test_non_scalar_loss_rejected(f64):
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError, match="scalar"):
        ad.backward(a * 2.0)


def test_no_grad_records_nothing(f64):
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.exp(a) * 2.0
    assert len(ad.get_tape()) == 0
    assert not out.requires_grad


def test_precision_is_thread_local():
    seen = {}

    def worker():
        seen["dtype"] = ad.get_default_dtype()

    with ad.precision("float64"):
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert Tensor([1.0]).dtype == np.float64
    assert seen["dtype"] == np.float32
    assert Tensor([1.0]).dtype == np.float32


def test_unknown_precision_rejected():
    with pytest.raises(ValueError):
        ad.set_default_dtype("float16")


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_broadcast_add_gradient_is_reduction(rows, cols, seed):
    rng = np.random.default_rng(seed)
    with ad.precision("float64"):
        a = Tensor(rng.normal(size=(rows, cols)), requires_grad=True)
        b = Tensor(rng.normal(size=(cols,)), requires_grad=True)
        w = rng.normal(size=(rows, cols))
        ad.backward(ad.sum((a + b) * w))
        np.testing.assert_allclose(a.grad, w)
        np.testing.assert_allclose(b.grad, w.sum(axis=0))
