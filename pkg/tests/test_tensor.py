"""Tensor engine tests: loop oracles, finite-difference gradient checks."""

import numpy as np
import pytest

from flexctl.tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    UsageError,
    count_flops,
    grad,
    no_grad,
)


# ----------------------------------------------------------------------
# independent oracles
# ----------------------------------------------------------------------

def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def conv2d_oracle(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    cin, h, wd = x.shape
    cout, cin2, k, _ = w.shape
    assert cin == cin2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((cout, ho, wo), dtype=np.float64)
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            acc += float(w[co, ci, ky, kx]) * float(xp[ci, oy * stride + ky, ox * stride + kx])
                out[co, oy, ox] = acc
    return out


def fd_gradient(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


# ----------------------------------------------------------------------
# forward values
# ----------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2, dtype=np.float32))
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]], dtype=np.float32))
    assert np.array_equal((a @ b).numpy(), b.numpy())


def test_matmul_hand():
    a = Tensor(np.array([[1.0, 2.0]]))
    b = Tensor(np.array([[3.0], [4.0]]))
    assert (a @ b).item() == 11.0


def test_matmul_vs_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    got = (Tensor(a.astype(np.float32)) @ Tensor(b.astype(np.float32))).numpy()
    want = matmul_oracle(a, b)
    assert np.max(np.abs(got - want)) <= 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))


def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = Tensor(np.full((1, 1, 1, 1), 2.0, dtype=np.float32))
    out = x.conv2d(w, stride=1, pad=0)
    assert np.array_equal(out.numpy(), np.full((1, 1, 3, 3), 2.0, dtype=np.float32))


def test_conv2d_zero_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
    w = Tensor(np.zeros((3, 2, 3, 3), dtype=np.float32))
    assert np.all(x.conv2d(w, stride=1, pad=1).numpy() == 0.0)


@pytest.mark.parametrize("side,stride,pad", [(8, 1, 0), (8, 1, 1), (9, 2, 1)])
def test_conv2d_vs_loop_oracle(side, stride, pad):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, side, side))
    w = rng.standard_normal((4, 2, 3, 3))
    got = Tensor(x[None].astype(np.float32)).conv2d(Tensor(w.astype(np.float32)), stride, pad).numpy()[0]
    want = conv2d_oracle(x, w, stride, pad)
    assert np.max(np.abs(got - want)) <= 1e-5


def test_conv2d_non_integral_output():
    x = Tensor(np.zeros((1, 1, 6, 6)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(DimensionError):
        x.conv2d(w, stride=2, pad=0)


def test_conv2d_even_kernel_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 4, 4))).conv2d(Tensor(np.zeros((1, 1, 2, 2))))


def test_mean_all():
    x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]))
    assert x.mean().item() == 4.0


def test_mean_constant():
    x = Tensor(np.full((3, 4, 2), 2.5, dtype=np.float32))
    for dims in [None, (0,), (1, 2), (0, 2)]:
        assert np.allclose(x.mean(dims).numpy(), 2.5)


def test_mean_rowwise_vs_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 9))
    got = Tensor(x.astype(np.float32)).mean(dims=1).numpy()
    want = np.array([sum(float(v) for v in row) / 9 for row in x])
    assert np.max(np.abs(got - want)) <= 1e-6


def test_pointwise_values():
    assert Tensor(np.array(0.0)).sigmoid().item() == 0.5
    assert Tensor(np.array(0.0)).silu().item() == 0.0
    assert abs(Tensor(np.array(20.0)).sigmoid().item() - 1.0) <= 1e-6


def test_broadcast_trailing_alignment():
    # table-driven: (shape_a, shape_b, expected result shape)
    cases = [
        ((4, 1, 3), (2, 3), (4, 2, 3)),
        ((5, 1), (1, 7), (5, 7)),
        ((2, 3), (3,), (2, 3)),
        ((8, 1, 1, 1), (8, 2, 4, 4), (8, 2, 4, 4)),
    ]
    rng = np.random.default_rng(5)
    for sa, sb, expect in cases:
        a = Tensor(rng.standard_normal(sa).astype(np.float32))
        b = Tensor(rng.standard_normal(sb).astype(np.float32))
        assert (a + b).shape == expect
        assert (a * b).shape == expect
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))


def test_nonfinite_is_an_error():
    big = Tensor(np.array([3e38], dtype=np.float32))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        big * big


# ----------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    (g,) = grad(x.sum(), [x])
    assert np.array_equal(g, np.ones((3, 4), dtype=np.float32))


def test_grad_of_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (g,) = grad((x * x).sum(), [x])
    assert np.allclose(g, [2.0, -4.0, 6.0])


def test_grad_accumulates_over_fanout():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0  # x feeds two consumers
    (g,) = grad(y.sum(), [x])
    assert np.allclose(g, [2 * 2.0 + 3.0])


def test_grad_disconnected_param_is_zero():
    x = Tensor(np.array([1.0]), requires_grad=True)
    z = Tensor(np.array([5.0]), requires_grad=True)
    (gx, gz) = grad((x * x).sum(), [x, z])
    assert np.allclose(gx, [2.0])
    assert np.array_equal(gz, np.zeros_like(z.numpy()))


def test_grad_non_scalar_loss_rejected():
    x = Tensor(np.ones((2,)), requires_grad=True)
    with pytest.raises(UsageError):
        grad(x * 2.0, [x])


def test_tape_visits_each_primitive_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = x * 2.0
    b = a + x
    c = (b * a).sum()
    order = c._toposort()
    assert len(order) == len({id(n) for n in order})


def test_grad_composed_conv_silu_mean_vs_fd():
    # analytic gradient of a small conv -> silu -> mean network vs central
    # finite differences in float64
    rng = np.random.default_rng(21)
    x0 = rng.standard_normal((1, 2, 6, 6))
    w0 = rng.standard_normal((3, 2, 3, 3)) * 0.5

    def loss_np(wflat: np.ndarray) -> float:
        w = Tensor(wflat.reshape(3, 2, 3, 3))
        return Tensor(x0).conv2d(w, 1, 1).silu().mean().item()

    w = Tensor(w0.copy(), requires_grad=True)
    loss = Tensor(x0).conv2d(w, 1, 1).silu().mean()
    (gw,) = grad(loss, [w])
    fd = fd_gradient(lambda arr: loss_np(arr.reshape(-1)), w0.copy())
    assert rel_err(gw, fd) <= 1e-5


PRIMITIVE_CASES = [
    ("add", lambda a, b: (a + b).sum(), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: (a + b).sum(), [(2, 1, 4), (3, 4)]),
    ("sub", lambda a, b: (a - b).sum(), [(5,), (5,)]),
    ("mul", lambda a, b: (a * b).mean(), [(4, 4), (4, 4)]),
    ("mul_broadcast", lambda a, b: (a * b).mean(), [(2, 3, 2, 2), (2, 1, 1, 1)]),
    ("matmul", lambda a, b: (a @ b).sum(), [(4, 5), (5, 3)]),
    ("batched_matmul", lambda a, b: (a @ b).sum(), [(2, 3, 4), (2, 4, 3)]),
    ("scale", lambda a, b: (a.scale(1.7) * b).sum(), [(6,), (6,)]),
    ("sigmoid", lambda a, b: (a.sigmoid() * b).sum(), [(7,), (7,)]),
    ("silu", lambda a, b: (a.silu() * b).sum(), [(7,), (7,)]),
    ("softmax", lambda a, b: (a.softmax() * b).sum(), [(3, 5), (3, 5)]),
    ("layer_norm", lambda a, b: (a.layer_norm() * b).sum(), [(3, 8), (3, 8)]),
    ("group_norm", lambda a, b: (a.group_norm(2) * b).sum(), [(2, 4, 3, 3), (2, 4, 3, 3)]),
    ("mean_dims", lambda a, b: (a.mean(dims=(1,)) * b.mean(dims=(1,))).sum(), [(4, 6), (4, 6)]),
    ("reshape_transpose", lambda a, b: (a.reshape(6, 4).transpose(1, 0) * b).sum(), [(2, 3, 4), (4, 6)]),
    ("upsample2x", lambda a, b: (a.upsample2x() * b).sum(), [(1, 2, 3, 3), (1, 2, 6, 6)]),
    ("conv2d_s1", lambda a, b: (a.conv2d(b, 1, 1)).mean(), [(1, 2, 5, 5), (3, 2, 3, 3)]),
    ("conv2d_s2", lambda a, b: (a.conv2d(b, 2, 1)).mean(), [(1, 2, 5, 5), (3, 2, 3, 3)]),
]


@pytest.mark.parametrize("name,fn,shapes", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_vs_fd(name, fn, shapes):
    # every primitive, float64, randomized small shapes (<= 512 scalars)
    rng = np.random.default_rng(hash(name) % 2**32)
    arrays = [rng.standard_normal(s) for s in shapes]
    assert all(a.size <= 512 for a in arrays)
    for target in range(2):
        def loss_at(x: np.ndarray, target=target) -> float:
            ops = [Tensor(x if i == target else arrays[i]) for i in range(2)]
            return fn(*ops).item()

        tensors = [Tensor(arrays[i].copy(), requires_grad=(i == target)) for i in range(2)]
        out = fn(*tensors)
        (g,) = grad(out, [tensors[target]])
        fd = fd_gradient(loss_at, arrays[target].copy())
        assert rel_err(g, fd) <= 1e-5, f"{name} wrt operand {target}"


def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        y = x.conv2d(w, 1, 1).silu().group_norm(2).mean()
        gs = grad(y, [x, w])
        return y.item(), gs

    y1, g1 = run()
    y2, g2 = run()
    assert y1 == y2
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


# ----------------------------------------------------------------------
# instrumentation and modes
# ----------------------------------------------------------------------

def test_no_grad_builds_no_tape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y._backward is None and y._parents == ()


def test_flop_counter_matmul_and_conv():
    a = Tensor(np.ones((4, 5), dtype=np.float32))
    b = Tensor(np.ones((5, 3), dtype=np.float32))
    with count_flops() as c:
        a @ b
    assert c.total == 2 * 4 * 5 * 3

    x = Tensor(np.ones((2, 3, 8, 8), dtype=np.float32))
    w = Tensor(np.ones((6, 3, 3, 3), dtype=np.float32) * 0.01)
    with count_flops() as c:
        x.conv2d(w, 1, 1)
    assert c.total == 2 * 2 * 6 * 3 * 9 * 8 * 8


def test_flop_counter_pointwise_at_tensor_size():
    x = Tensor(np.ones((3, 7), dtype=np.float32))
    with count_flops() as c:
        x.sigmoid()
    assert c.total == 21
    with count_flops() as c:
        x.mean()
    assert c.total == 21
