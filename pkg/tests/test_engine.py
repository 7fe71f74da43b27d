import numpy as np
import pytest
from hypothesis import given, strategies as st

from evseg.engine import SGD, Conv2d, Module, Tensor, check_finite, grad_check, make_node, ops
from evseg.engine import checkpoint
from evseg.engine.gradcheck import relative_error
from evseg.errors import DimensionError, NumericError, ParseError, ValidationError
from evseg.losses import bce_loss, ce_loss

SEEDS = range(10)


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def away_from_zero(rng, *shape):
    """Values bounded away from the ReLU kink."""
    return Tensor(rng.choice([-1, 1], size=shape) * rng.uniform(0.1, 1.0, size=shape),
                  requires_grad=True)


def distinct(rng, *shape):
    """Distinct, well-separated values so max-pool has no near-ties."""
    vals = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1
    return Tensor(vals + rng.uniform(-0.01, 0.01, size=shape), requires_grad=True)


def _weighted(out, rng):
    # a random linear functional makes every output element matter
    w = Tensor(rng.normal(size=out.shape))
    return ops.sum(ops.mul(out, w))


def op_cases(rng):
    x = leaf(rng, 2, 3, 6, 6)
    yield "add", (lambda a=leaf(rng, 2, 3, 1, 6), b=leaf(rng, 1, 3, 6, 1):
                  (lambda: ops.add(a, b), [a, b]))()
    yield "mul", (lambda a=leaf(rng, 2, 3, 4), b=leaf(rng, 3, 1):
                  (lambda: ops.mul(a, b), [a, b]))()
    yield "neg", (lambda: ops.neg(x), [x])
    r = away_from_zero(rng, 2, 3, 5)
    yield "relu", (lambda: ops.relu(r), [r])
    s = leaf(rng, 3, 4, low=-4, high=4)
    yield "sigmoid", (lambda: ops.sigmoid(s), [s])
    g = leaf(rng, 2, 3)
    yield "scale_channels", (lambda: ops.scale_channels(x, g), [x, g])
    yield "mean", (lambda: ops.mean(x), [x])
    yield "reshape", (lambda: ops.reshape(x, (2, 18, 6)), [x])
    c = leaf(rng, 2, 2, 6, 6)
    yield "concat", (lambda: ops.concat([x, c]), [x, c])
    yield "slice_channels", (lambda: ops.slice_channels(x, 1, 3), [x])
    lw, lb, lx = leaf(rng, 4, 3), leaf(rng, 4), leaf(rng, 2, 3)
    yield "linear", (lambda: ops.linear(lx, lw, lb), [lx, lw, lb])
    w, b = leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    yield "conv2d", (lambda: ops.conv2d(x, w, b, 1, 1), [x, w, b])
    x7, w2 = leaf(rng, 1, 3, 7, 5), leaf(rng, 2, 3, 3, 3)
    yield "conv2d_stride2", (lambda: ops.conv2d(x7, w2, None, 2, 1), [x7, w2])
    w1 = leaf(rng, 5, 3, 1, 1)
    yield "conv2d_1x1", (lambda: ops.conv2d(x, w1, None, 1, 0), [x, w1])
    yield "global_avg_pool", (lambda: ops.global_avg_pool(x), [x])
    yield "avg_pool", (lambda: ops.avg_pool(x, 2), [x])
    xo = leaf(rng, 1, 2, 7, 5)
    yield "avg_pool_clamped", (lambda: ops.avg_pool(xo, 3), [xo])
    m = distinct(rng, 2, 2, 6, 6)
    yield "max_pool", (lambda: ops.max_pool(m, 2), [m])
    mo = distinct(rng, 1, 2, 7, 5)
    yield "max_pool_clamped", (lambda: ops.max_pool(mo, 3), [mo])
    yield "adaptive_avg_pool", (lambda: ops.adaptive_avg_pool(x, (4, 3)), [x])
    u = leaf(rng, 2, 3, 3, 4)
    yield "bilinear_upsample", (lambda: ops.bilinear_upsample(u, (7, 9)), [u])
    logits = leaf(rng, 2, 5, 3, 3, low=-3, high=3)
    tgt = rng.integers(0, 5, size=(2, 3, 3))
    tgt[0, 0, 0] = 255
    yield "ce_loss", (lambda: ce_loss(logits, tgt), [logits])
    z = leaf(rng, 2, 2, 3, 3, low=-3, high=3)
    t = rng.uniform(size=(2, 2, 3, 3))
    yield "bce_loss", (lambda: bce_loss(z, t), [z])


CASE_NAMES = [name for name, _ in op_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", CASE_NAMES)
def test_op_gradients(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fn, inputs = dict(op_cases(rng))[name]
        probe = np.random.default_rng(100 + seed)
        out0 = fn()
        w = Tensor(probe.normal(size=out0.shape))
        closure = (lambda: ops.sum(ops.mul(fn(), w))) if out0.data.size > 1 else fn
        rep = grad_check(closure, inputs, h=1e-6, tol=1e-4)
        worst = max(worst, rep.worst)
    assert worst < 1e-4, f"{name}: max relative error {worst:.2e}"


def test_linear_closure_is_exact():
    rng = np.random.default_rng(0)
    x = leaf(rng, 20)
    w = Tensor(rng.normal(size=20))
    rep = grad_check(lambda: ops.sum(ops.mul(w, x)), [x])
    assert rep.worst < 1e-8


def test_composed_closure():
    rng = np.random.default_rng(3)
    x, w = leaf(rng, 1, 2, 8, 8), leaf(rng, 4, 2, 3, 3)
    tgt = rng.integers(0, 4, size=(1, 4, 4))
    rep = grad_check(lambda: ce_loss(ops.max_pool(ops.relu(ops.conv2d(x, w, None, 1, 1)), 2),
                                     tgt), [x, w])
    assert rep.ok, rep.max_rel_error


def test_corrupted_backward_is_caught():
    def bad_square(a):
        return make_node(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")  # missing 2x

    x = Tensor(np.random.default_rng(0).uniform(0.5, 1, 6), requires_grad=True)
    rep = grad_check(lambda: ops.sum(bad_square(x)), [x])
    assert not rep.ok and rep.worst > 0.4


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_names_the_node():
    x = Tensor(np.array([1e308, 1e308]), requires_grad=True)
    with pytest.raises(NumericError, match="mul"):
        grad_check(lambda: ops.sum(ops.mul(x, x)), [x])
    with check_finite():
        with pytest.raises(NumericError, match="add"):
            ops.add(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


def test_grad_check_needs_float64():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: ops.sum(x), [x])


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


# -- forward examples -------------------------------------------------------------------

def test_identity_1x1_conv(rng):
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    w = Tensor(np.eye(4).reshape(4, 4, 1, 1))
    np.testing.assert_array_equal(ops.conv2d(x, w, Tensor(np.zeros(4))).data, x.data)


def test_ones_kernel_counts_taps():
    out = ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), None, 1, 1)
    assert out.data[0, 0, 2, 2] == 9 and out.data[0, 0, 0, 0] == 4 and out.data[0, 0, 0, 2] == 6


def test_conv_matches_direct_loop(rng):
    x, w, b = rng.normal(size=(2, 3, 7, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for k in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, k, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[k]).sum() + b[k]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    with pytest.raises(DimensionError):
        ops.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 2, 2))), None, 2, 0)


def test_unit_gains_are_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(ops.scale_channels(x, Tensor(np.ones((2, 3)))).data, x.data)
    with pytest.raises(DimensionError):
        ops.scale_channels(x, Tensor(np.ones((2, 4))))


def test_sigmoid_at_zero():
    z = Tensor(np.zeros(1), requires_grad=True)
    s = ops.sigmoid(z)
    s.backward(np.ones(1))
    assert s.data[0] == 0.5 and z.grad[0] == 0.25


def test_pool_constancy():
    c = Tensor(np.full((2, 3, 8, 8), 1.7))
    np.testing.assert_allclose(ops.global_avg_pool(c).data, 1.7)
    up = ops.bilinear_upsample(Tensor(np.full((1, 2, 4, 4), 1.7)), (8, 8))
    np.testing.assert_allclose(ops.avg_pool(up, 2).data, 1.7, rtol=0, atol=1e-15)
    with pytest.raises(DimensionError):
        ops.bilinear_upsample(c, (0, 4))


def test_bilinear_matches_half_pixel_convention():
    # align_corners=False: output centre (i+0.5)/s - 0.5 in input pixels, edge clamped
    x = Tensor(np.arange(4.0).reshape(1, 1, 1, 4))
    out = ops.bilinear_upsample(x, (1, 8)).data[0, 0, 0]
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3])


def test_max_pool_routes_to_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [3.0, 2.0]]]]), requires_grad=True)
    ops.sum(ops.max_pool(x, 2)).backward()
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


def test_concat_and_slices():
    a, b = Tensor(np.ones((1, 3, 2, 2))), Tensor(np.zeros((1, 2, 2, 2)))
    c = ops.concat([a, b])
    assert c.shape == (1, 5, 2, 2)
    assert ops.concat([a]) is a
    np.testing.assert_array_equal(ops.slice_channels(c, 0, 3).data, a.data)
    np.testing.assert_array_equal(ops.slice_channels(c, 3, 5).data, b.data)
    with pytest.raises(DimensionError):
        ops.concat([a, Tensor(np.zeros((1, 2, 3, 2)))])


# -- graph properties -------------------------------------------------------------------

def test_backward_visits_shared_nodes_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ops.mul(x, x)
    z = ops.add(y, y)            # dz/dx = 4x
    ops.sum(z).backward()
    assert x.grad[0] == 8.0


def test_adjoint_is_linear(rng):
    x = leaf(rng, 1, 2, 6, 6)
    w = leaf(rng, 3, 2, 3, 3)

    def f1():
        return ops.sum(ops.relu(ops.conv2d(x, w, None, 1, 1)))

    def f2():
        return ops.mean(ops.sigmoid(ops.conv2d(x, w, None, 1, 1)))

    f1().backward()
    g1 = x.grad.copy()
    x.grad = w.grad = None
    f2().backward()
    g2 = x.grad.copy()
    x.grad = w.grad = None
    ops.add(f1(), f2()).backward()
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-12, atol=1e-14)


def test_ops_do_not_mutate_inputs(rng):
    x = leaf(rng, 2, 3, 6, 6)
    w = leaf(rng, 4, 3, 3, 3)
    before = x.data.copy(), w.data.copy()
    out = ops.max_pool(ops.relu(ops.conv2d(x, w, None, 1, 1)), 2)
    ops.sum(ops.bilinear_upsample(out, (6, 6))).backward()
    np.testing.assert_array_equal(x.data, before[0])
    np.testing.assert_array_equal(w.data, before[1])


def test_deep_chain_backward_is_iterative():
    x = Tensor(np.ones(1), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ops.add(y, Tensor(np.ones(1)))
    ops.sum(y).backward()
    assert x.grad[0] == 1.0


# -- modules, optimizer, checkpoints ----------------------------------------------------

class Tiny(Module):
    def __init__(self, rng):
        self.a = Conv2d(2, 3, 3, rng, dtype=np.float64)
        self.b = [Conv2d(3, 1, 1, rng, dtype=np.float64)]

    def forward(self, x):
        return self.b[0](ops.relu(self.a(x)))


def test_state_dict_names_and_strict_load(rng):
    m = Tiny(rng)
    names = [n for n, _ in m.named_parameters()]
    assert names == ["a.weight", "a.bias", "b.0.weight", "b.0.bias"]
    state = m.state_dict()
    state.pop("a.bias")
    with pytest.raises(ValidationError):
        m.load_state_dict(state)


def test_checkpoint_roundtrip_and_order_independence(tmp_path, rng):
    m = Tiny(rng)
    state = {k: v.astype(np.float32) for k, v in m.state_dict().items()}
    buf = checkpoint.dumps(state)
    back = checkpoint.loads(buf)
    assert checkpoint.dumps(back) == buf
    path = tmp_path / "m.ckp"
    checkpoint.save(path, dict(reversed(list(state.items()))))
    m2 = Tiny(np.random.default_rng(99))
    m2.load_state_dict(checkpoint.load(path))
    for k, v in m2.state_dict().items():
        np.testing.assert_array_equal(v, state[k])


def test_checkpoint_parse_errors(rng):
    buf = checkpoint.dumps(Tiny(rng).state_dict())
    with pytest.raises(ParseError, match="offset 0"):
        checkpoint.loads(b"NOPE" + buf[4:])
    with pytest.raises(ParseError):
        checkpoint.loads(buf[:-3])


def test_sgd_momentum_two_steps():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD(lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step([("p", p)])
    p.grad = np.array([1.0])
    opt.step([("p", p)])
    # v1 = 1, v2 = 0.9 + 1 = 1.9; p = 1 - 0.1 - 0.19
    assert p.data[0] == pytest.approx(0.71)


def test_sgd_clip_norm():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    SGD(lr=1.0, momentum=0.0, clip_norm=1.0).step([("p", p)])
    np.testing.assert_allclose(p.data, [-0.6, -0.8])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(2, 9), st.integers(2, 9))
def test_adaptive_pool_rows_average(n, c, h, w):
    x = Tensor(np.random.default_rng(h * w).normal(size=(n, c, h, w)))
    out = ops.adaptive_avg_pool(x, (1, 1)).data[:, :, 0, 0]
    np.testing.assert_allclose(out, x.data.mean(axis=(2, 3)), atol=1e-12)
