import copy

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weighted_experts import nn
from weighted_experts.errors import NonFiniteError, ShapeError
from weighted_experts.nn import autograd as ag
from weighted_experts.nn import serialize


def finite_diff(f, x: np.ndarray, eps=1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def check_layer_gradients(net, x, n_classes, seed=0):
    """Analytic vs central-difference gradients for every parameter and the input."""
    y = np.random.default_rng(seed).integers(0, n_classes, len(x))

    def loss_value():
        return float(nn.cross_entropy(net(nn.Tensor(x)), y).data)

    # a leaf parameter standing in for x exposes the input gradient
    xp = nn.Parameter(x.copy())
    with nn.Tape() as tape2:
        loss2 = nn.cross_entropy(net(xp), y)
    nn.zero_grad(net.parameters())
    nn.backward(tape2, loss2)
    worst = rel_err(xp.grad, finite_diff(loss_value, x))
    for p in net.parameters():
        worst = max(worst, rel_err(p.grad, finite_diff(loss_value, p.data)))
    return worst


# ---------------------------------------------------------------- forward examples


def test_identity_dense():
    d = nn.Dense(3, 3)
    d.weight.data = np.eye(3)
    out, _ = nn.forward(nn.Sequential([d]), np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_relu_values():
    out, _ = nn.forward(nn.Sequential([nn.ReLU()]), np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])


def test_conv_all_ones():
    conv = nn.Conv2d(1, 1, 3)
    conv.weight.data[:] = 1.0
    out, _ = nn.forward(nn.Sequential([conv]), np.ones((1, 1, 5, 5)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(3)
    conv = nn.Conv2d(2, 3, 3, rng)
    conv.bias.data = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 6, 5))
    got = conv(nn.Tensor(x)).data
    want = np.zeros((2, 3, 4, 3))
    for n in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(3):
                    want[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * conv.weight.data[o]) + conv.bias.data[o]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_maxpool_drops_odd_edge():
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    out = nn.MaxPool2()(nn.Tensor(x)).data
    np.testing.assert_array_equal(out[0, 0], [[6, 8], [16, 18]])


def test_shape_error_names_layer():
    net = nn.Sequential([nn.Dense(4, 2, name="fc-in")])
    with pytest.raises(ShapeError, match="fc-in.*\\(N, 4\\).*\\(2, 3\\)"):
        nn.forward(net, np.zeros((2, 3)))


def test_sequential_input_shape_error():
    net = nn.Sequential([nn.Flatten()], input_shape=(1, 16, 16))
    with pytest.raises(ShapeError, match="per-example shape"):
        nn.forward(net, np.zeros((2, 1, 8, 8)))


def test_forward_rejects_non_finite_output():
    net = nn.Sequential([nn.Dense(2, 2)])
    with pytest.raises(NonFiniteError):
        nn.forward(net, np.array([[np.inf, 0.0]]))


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform():
    assert float(nn.cross_entropy(nn.Tensor([[0.0, 0.0]]), [0]).data) == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_saturated():
    loss = float(nn.cross_entropy(nn.Tensor([[1000.0, 0.0]]), [0]).data)
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
    assert float(nn.cross_entropy(nn.Tensor([[0.0, 1000.0]]), [0]).data) == pytest.approx(1000.0)


def test_cross_entropy_matches_high_precision():
    rng = np.random.default_rng(11)
    z = rng.normal(scale=3.0, size=(8, 4))
    y = rng.integers(0, 4, 8)
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, lab in zip(z, y):
        lse = mpmath.log(sum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
        total += lse - mpmath.mpf(float(row[lab]))
    want = float(total / 8)
    assert float(nn.cross_entropy(nn.Tensor(z), y).data) == pytest.approx(want, rel=1e-14)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        nn.cross_entropy(nn.Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- backward


def test_scalar_product_gradient():
    w = nn.Parameter(np.array([[2.0]]))
    with nn.Tape() as tape:
        loss = ag.reshape(ag.matmul(nn.Tensor([[3.0]]), w), ())
    nn.backward(tape, loss)
    assert w.grad[0, 0] == 3.0


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        nn.backward(nn.Tape(), nn.Tensor(1.0))


LAYER_CASES = {
    "dense": (lambda r: nn.Sequential([nn.Dense(5, 4, r)]), (3, 5), 4),
    "conv": (lambda r: nn.Sequential([nn.Conv2d(2, 3, 3, r), nn.Flatten(), nn.Dense(3 * 3 * 3, 3, r)]),
             (2, 2, 5, 5), 3),
    "relu": (lambda r: nn.Sequential([nn.Dense(5, 6, r), nn.ReLU(), nn.Dense(6, 3, r)]), (4, 5), 3),
    "maxpool": (lambda r: nn.Sequential([nn.MaxPool2(), nn.Flatten(), nn.Dense(2 * 2 * 2, 3, r)]),
                (2, 2, 5, 4), 3),
    "softmax": (lambda r: nn.Sequential([nn.Dense(4, 3, r), nn.Softmax(), nn.Dense(3, 3, r)]), (3, 4), 3),
    "encoder": (lambda r: nn.Sequential([
        nn.Conv2d(1, 2, 3, r), nn.ReLU(), nn.MaxPool2(), nn.Conv2d(2, 3, 3, r), nn.ReLU(), nn.MaxPool2(),
        nn.Flatten(), nn.Dense(3, 4, r), nn.ReLU(), nn.Dense(4, 3, r)]), (2, 1, 10, 10), 3),
}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_finite_difference_gradients(case):
    build, shape, n_classes = LAYER_CASES[case]
    rng = np.random.default_rng(0)
    net = build(rng)
    for p in net.parameters():
        if p.name.endswith("bias"):
            p.data = rng.normal(scale=0.1, size=p.data.shape)
    x = rng.normal(size=shape)
    assert check_layer_gradients(net, x, n_classes) < 1e-4


def test_fusion_ops_gradients():
    """concat / column / mul / add_n / segment_max chained into a loss."""
    rng = np.random.default_rng(1)
    a = nn.Parameter(rng.normal(size=(4, 3)))
    b = nn.Parameter(rng.normal(size=(4, 2)))
    s = nn.Parameter(rng.normal(size=(4, 2)))
    segs = [[0, 3], [1], [2, 4]]
    y = np.array([0, 2, 1, 2])

    def build():
        z = ag.concat([a, b], axis=1)
        w = ag.mul(ag.column(s, 0), z)
        w2 = ag.mul(ag.column(s, 1), z)
        return nn.cross_entropy(ag.segment_max(ag.add_n([w, w2, z]), segs), y)

    with nn.Tape() as tape:
        loss = build()
    nn.backward(tape, loss)
    for p in (a, b, s):
        fd = finite_diff(lambda: float(build().data), p.data)
        assert rel_err(p.grad, fd) < 1e-4


def test_frozen_parameter_gets_gradient_but_no_update():
    d = nn.Dense(3, 2, np.random.default_rng(0))
    d.weight.trainable = False
    before = d.weight.data.copy()
    opt = nn.Adam(d.parameters())
    out, tape = nn.forward(nn.Sequential([d]), np.ones((2, 3)))
    with tape:
        loss = nn.cross_entropy(out, [0, 1])
    nn.backward(tape, loss)
    assert np.any(d.weight.grad != 0)
    opt.step()
    np.testing.assert_array_equal(d.weight.data, before)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(z):
    s = nn.softmax(nn.Tensor(z)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_parameter():
    p = nn.Parameter(np.array([1.5, -2.0]))
    state = nn.AdamState.for_params([p])
    nn.adam_step([p], [np.zeros(2)], state, 1e-3)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    # m_hat = g, v_hat = g^2 after bias correction -> delta = lr * g / (|g| + eps)
    p = nn.Parameter(np.array([0.0]))
    state = nn.AdamState.for_params([p])
    nn.adam_step([p], [np.array([1.0])], state, 1e-3)
    assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_shape_mismatch():
    p = nn.Parameter(np.zeros(2))
    with pytest.raises(ShapeError):
        nn.adam_step([p], [np.zeros(3)], nn.AdamState.for_params([p]), 1e-3)


def _train_100_steps(seed):
    rng = np.random.default_rng(seed)
    net = nn.Sequential([nn.Conv2d(1, 2, 3, rng), nn.ReLU(), nn.Flatten(), nn.Dense(2 * 4 * 4, 3, rng)])
    opt = nn.Adam(net.parameters())
    x = rng.normal(size=(8, 1, 6, 6))
    y = rng.integers(0, 3, 8)
    for _ in range(100):
        opt.zero_grad()
        out, tape = nn.forward(net, x)
        with tape:
            loss = nn.cross_entropy(out, y)
        nn.backward(tape, loss)
        opt.step()
    return [p.data for p in net.parameters()]


def test_training_is_bit_deterministic():
    for a, b in zip(_train_100_steps(5), _train_100_steps(5)):
        assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- serialization


def test_weight_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    net = nn.Sequential([nn.Conv2d(1, 2, 3, rng), nn.Flatten(), nn.Dense(8, 3, rng)])
    state = serialize.state_dict(net.named_parameters())
    serialize.save(tmp_path / "w.efw", state)
    raw = (tmp_path / "w.efw").read_bytes()
    assert raw[:4] == b"EFW1"
    back = serialize.load(tmp_path / "w.efw")
    assert list(back) == list(state)
    for k in state:
        assert back[k].tobytes() == state[k].tobytes()
    assert serialize.dumps(back) == raw

    other = copy.deepcopy(net)
    for p in other.parameters():
        p.data = p.data * 0
    serialize.load_state_dict(other.named_parameters(), back)
    for p, q in zip(net.parameters(), other.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
