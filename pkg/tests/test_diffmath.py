import threading
import zlib

import numpy as np
import pytest

from mrssm import diffmath as dm
from mrssm.diffmath import ShapeError, Tape, Tensor


def grad_of(fn, *arrays):
    ts = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with dm.precision(np.float64), Tape() as tape:
        out = fn(*ts)
    return out, tape.gradient(out, ts)


def test_square_and_its_derivative():
    out, (g,) = grad_of(lambda x: dm.square(x), 3.0)
    assert float(out.data) == 9.0
    assert float(g) == 6.0


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 2)).astype(np.float32)
    assert np.array_equal(dm.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_conv_all_ones_center_is_nine():
    x = Tensor(np.ones((1, 1, 16, 16)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = dm.conv2d(x, w, stride=1, padding=1)
    assert out.shape == (1, 1, 16, 16)
    assert float(out.data[0, 0, 8, 8]) == 9.0
    assert float(out.data[0, 0, 0, 0]) == 4.0


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    with dm.precision(np.float64):
        out = dm.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, bias=Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 3))
    for i in range(4):
        for j in range(3):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_transposed_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(5, 3, 4, 4))
    with dm.precision(np.float64):
        y = dm.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        u = rng.normal(size=y.shape)
        xt = dm.conv_transpose2d(Tensor(u), Tensor(w), stride=2, padding=1, output_size=(8, 8)).data
    assert xt.shape == x.shape
    assert np.isclose(np.sum(y * u), np.sum(x * xt), rtol=1e-12)


def test_gradient_of_tanh_layer_matches_finite_differences():
    rng = np.random.default_rng(3)
    W, x = rng.normal(size=(4, 4)), rng.normal(size=(1, 4))
    err = dm.grad_check(lambda p: dm.sum(dm.tanh(dm.matmul(p["x"], p["W"]))), {"W": W, "x": x}, step=1e-3)
    assert err < 1e-4


def test_unused_parameter_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = dm.sum(dm.square(a))
    grads = tape.gradient(out, {"a": a, "b": b})
    assert np.array_equal(grads["b"], np.zeros(3))
    assert np.array_equal(grads["a"], 2 * np.ones(3))


def test_non_scalar_output_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = dm.square(a)
    with pytest.raises(ShapeError):
        tape.gradient(out, [a])


def test_shape_mismatch_names_the_operation():
    with pytest.raises(ShapeError, match="add"):
        dm.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError, match="matmul"):
        dm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    # leading-dimension broadcasting is allowed, trailing is not
    dm.add(Tensor(np.ones((5, 2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        dm.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_grad_check_linear_and_constant():
    rng = np.random.default_rng(4)
    a = rng.normal(size=5)
    assert dm.grad_check(lambda x: dm.sum(x * Tensor(a)), rng.normal(size=5)) < 1e-6
    errs = dm.grad_errors(lambda x: dm.sum(x * 0.0) + 1.0, rng.normal(size=3))
    assert errs["x"] == 0.0


def test_conv_tanh_mean_network_gradient():
    rng = np.random.default_rng(5)
    point = {"x": rng.normal(size=(2, 3, 8, 8)), "w": rng.normal(size=(4, 3, 4, 4)) * 0.3,
             "b": rng.normal(size=4)}
    errs = dm.grad_errors(lambda p: dm.mean(dm.tanh(dm.conv2d(p["x"], p["w"], 2, 1, bias=p["b"]))),
                          point, step=1e-5)
    assert max(errs.values()) < 1e-4


UNARY = {
    "neg": (dm.neg, lambda r: r.normal(size=(3, 4))),
    "square": (dm.square, lambda r: r.normal(size=(3, 4))),
    "sqrt": (dm.sqrt, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "exp": (dm.exp, lambda r: r.normal(size=(3, 4))),
    "log": (dm.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "tanh": (dm.tanh, lambda r: r.normal(size=(3, 4))),
    "sigmoid": (dm.sigmoid, lambda r: r.normal(size=(3, 4))),
    "softplus": (dm.softplus, lambda r: r.normal(size=(3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    fn, sample = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    weights = rng.normal(size=(3, 4))
    for _ in range(100 // len(UNARY) + 1):
        err = dm.grad_check(lambda x: dm.sum(fn(x) * Tensor(weights)), sample(rng), step=1e-5)
        assert err < 1e-4


BINARY = {
    "add": dm.add, "sub": dm.sub, "mul": dm.mul, "div": dm.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("b_shape", [(3, 4), (4,), ()])
def test_binary_primitive_gradients(name, b_shape):
    rng = np.random.default_rng(7)
    w = rng.normal(size=(3, 4))
    for _ in range(10):
        point = {"a": rng.normal(size=(3, 4)), "b": rng.uniform(0.5, 2.0, size=b_shape)}
        err = dm.grad_check(lambda p: dm.sum(BINARY[name](p["a"], p["b"]) * Tensor(w)), point, step=1e-5)
        assert err < 1e-4


def test_structural_primitive_gradients():
    rng = np.random.default_rng(8)
    w = rng.normal(size=(2, 6))

    def fn(p):
        c = dm.concat([p["a"], p["b"]], axis=-1)                       # (2, 6)
        s = dm.stack([c, c * 2.0], axis=0)                               # (2, 2, 6)
        g = dm.getitem(s, (slice(None), 1))                              # (2, 6)
        r = dm.reshape(dm.transpose(g, (1, 0)), (3, 4))
        e = dm.expand(dm.mean(r, axis=0), (2, 4))
        return dm.sum(g * Tensor(w)) + dm.sum(dm.square(e)) + dm.sum(dm.matmul(p["a"], p["m"]))

    point = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3)), "m": rng.normal(size=(3, 2))}
    assert dm.grad_check(fn, point, step=1e-5) < 1e-4


def test_transposed_conv_gradients():
    rng = np.random.default_rng(9)
    point = {"y": rng.normal(size=(2, 4, 4, 4)), "w": rng.normal(size=(4, 3, 4, 4)), "b": rng.normal(size=3)}
    errs = dm.grad_errors(lambda p: dm.sum(dm.square(dm.conv_transpose2d(p["y"], p["w"], 2, 1, bias=p["b"]))),
                          point, step=1e-5)
    assert max(errs.values()) < 1e-4


def test_forward_is_pure():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    w = Tensor(rng.normal(size=(4, 3, 4, 4)).astype(np.float32))
    a = dm.tanh(dm.conv2d(x, w, 2, 1)).data
    b = dm.tanh(dm.conv2d(x, w, 2, 1)).data
    assert a.tobytes() == b.tobytes()


def test_backward_is_linear():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=4), requires_grad=True)
    with Tape() as t1:
        f = dm.sum(dm.tanh(x))
    with Tape() as t2:
        g = dm.sum(dm.square(x))
    with Tape() as t3:
        h = dm.sum(dm.tanh(x)) + dm.sum(dm.square(x))
    np.testing.assert_allclose(t3.gradient(h, [x])[0], t1.gradient(f, [x])[0] + t2.gradient(g, [x])[0],
                               rtol=1e-6)


def test_float32_storage_by_default():
    t = Tensor(np.ones(3, dtype=np.float64))
    assert t.data.dtype == np.float32
    assert (t * 2.0).data.dtype == np.float32


def test_tapes_are_thread_local():
    results = {}

    def work(k):
        x = Tensor(np.full(3, float(k)), requires_grad=True)
        with Tape() as tape:
            out = dm.sum(dm.square(x))
        results[k] = tape.gradient(out, [x])[0]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, g in results.items():
        assert np.array_equal(g, np.full(3, 2.0 * k, dtype=np.float32))


@pytest.mark.filterwarnings("ignore:invalid value")
def test_first_nonfinite_names_op():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        dm.log(x)
    assert "log" in tape.first_nonfinite()
