import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import numeric_grad, rel_err
from hdrjoint import numerics as nx
from hdrjoint.numerics import Tensor


def _grad_of(fn, *inputs, wrt=0):
    ts = [Tensor(v, requires_grad=(i == wrt)) for i, v in enumerate(inputs)]
    fn(*ts).backward()
    return ts[wrt].grad


def _value(fn, *inputs):
    return float(fn(*[Tensor(v) for v in inputs]).data)


# --------------------------------------------------------------------------
# pointwise_linear


def test_pointwise_identity(rng):
    x = rng.normal(size=(4, 5, 3)).astype(np.float32)
    out = nx.pointwise_linear(x, np.eye(3), np.zeros(3))
    assert np.array_equal(out.data, x)


def test_pointwise_forced_value():
    out = nx.pointwise_linear(np.ones((2, 2, 3)), np.ones((1, 3)), np.array([0.5]))
    assert out.shape == (2, 2, 1)
    assert np.all(out.data == 3.5)


def test_pointwise_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        nx.pointwise_linear(np.ones((2, 2, 4)), np.ones((1, 3)), np.zeros(1))


@pytest.mark.parametrize("act", [None, "relu", "sigmoid"])
def test_pointwise_weight_grad_matches_fd(act):
    r = np.random.default_rng(7)
    x = r.normal(size=(3, 4, 3))
    w = r.normal(size=(5, 3))
    b = r.normal(size=5)
    with nx.precision(np.float64):
        f = lambda *a: nx.total(nx.pointwise_linear(*a, act=act))
        ana = _grad_of(f, x, w, b, wrt=1)
        num = numeric_grad(lambda wv: _value(f, x, wv, b), w)
        assert rel_err(ana, num) < 1e-3
        ana_x = _grad_of(f, x, w, b, wrt=0)
        num_x = numeric_grad(lambda xv: _value(f, xv, w, b), x)
        assert rel_err(ana_x, num_x) < 1e-3


def test_fused_activation_equals_separate(rng):
    x = rng.normal(size=(6, 3)).astype(np.float32)
    w = rng.normal(size=(4, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    for act in ("relu", "sigmoid"):
        fused = nx.pointwise_linear(x, w, b, act=act).data
        split = nx.activation(nx.pointwise_linear(x, w, b), act).data
        np.testing.assert_allclose(fused, split, rtol=1e-6, atol=1e-7)


# --------------------------------------------------------------------------
# activation


def test_sigmoid_at_zero():
    assert np.all(nx.sigmoid(np.zeros((3, 3))).data == 0.5)


def test_relu_of_negatives_is_zero(rng):
    x = -np.abs(rng.normal(size=(5, 5))) - 0.1
    assert np.all(nx.relu(x).data == 0)


@given(arrays(np.float32, (16,), elements=st.floats(-30, 30, width=32)))
def test_sigmoid_range(x):
    s = nx.sigmoid(x).data
    assert np.all(s >= 0) and np.all(s <= 1)
    # float32 saturates at |x| > ~17; strictly inside away from that
    mid = np.abs(x) < 15
    assert np.all((s[mid] > 0) & (s[mid] < 1))


def test_sigmoid_strict_range_random(rng):
    s = nx.sigmoid(rng.normal(size=1000) * 3).data
    assert np.all((s > 0) & (s < 1))


@pytest.mark.parametrize("kind", ["relu", "sigmoid"])
def test_activation_grad_matches_fd(kind):
    r = np.random.default_rng(3)
    x = r.normal(size=(4, 6))
    x[np.abs(x) < 0.05] = 0.3   # keep clear of the relu kink
    with nx.precision(np.float64):
        f = lambda t: nx.total(nx.mul(nx.activation(t, kind), Tensor(np.arange(24.0).reshape(4, 6))))
        assert rel_err(_grad_of(f, x), numeric_grad(lambda v: _value(f, v), x)) < 1e-3


def test_unknown_activation():
    with pytest.raises(ValueError):
        nx.activation(np.zeros(2), "tanh")


# --------------------------------------------------------------------------
# l1_loss


def test_l1_self_is_zero(rng):
    x = rng.normal(size=(3, 3))
    assert float(nx.l1_loss(x, x).data) == 0.0


def test_l1_forced_value():
    assert float(nx.l1_loss(np.array([1.0, 2.0]), np.array([0.0, 4.0])).data) == 1.5


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        nx.l1_loss(np.zeros(3), np.zeros(4))


def test_l1_grad_is_sign_over_n():
    r = np.random.default_rng(5)
    a = r.normal(size=(5, 4))
    b = a + np.where(r.random((5, 4)) < 0.5, -1, 1) * r.uniform(0.01, 1.0, (5, 4))
    with nx.precision(np.float64):
        ana = _grad_of(nx.l1_loss, a, b)
        num = numeric_grad(lambda v: _value(nx.l1_loss, v, b), a)
    np.testing.assert_allclose(ana, np.sign(a - b) / a.size)
    assert rel_err(ana, num) < 1e-3


def test_l1_tie_subgradient_is_zero():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nx.l1_loss(a, np.array([1.0, 3.0])).backward()
    assert a.grad[0] == 0.0 and a.grad[1] == -0.5


# --------------------------------------------------------------------------
# fixed_linear


def test_fixed_identity(rng):
    x = rng.normal(size=(4, 5, 2)).astype(np.float32)
    assert np.array_equal(nx.fixed_linear(x, np.eye(5), axis=1).data, x)


def test_fixed_orthonormal_round_trip(rng):
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    x = rng.normal(size=(6, 3)).astype(np.float32)
    back = nx.fixed_linear(nx.fixed_linear(x, q, axis=0), q.T, axis=0)
    np.testing.assert_allclose(back.data, x, atol=1e-5)


def test_fixed_adjoint_identity():
    r = np.random.default_rng(11)
    b = r.normal(size=(7, 5))
    x = r.normal(size=(5, 4))
    y = r.normal(size=(7, 4))
    with nx.precision(np.float64):
        bx = nx.fixed_linear(x, b, axis=0).data
        bty = nx.fixed_linear(y, b.T, axis=0).data
    assert abs(np.sum(bx * y) - np.sum(x * bty)) < 1e-5


def test_fixed_backward_applies_transpose_and_leaves_basis_alone():
    r = np.random.default_rng(2)
    basis = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    x = Tensor(r.normal(size=(2, 4, 3)), requires_grad=True)
    g = r.normal(size=(2, 3, 3)).astype(np.float32)
    nx.fixed_linear(x, basis, axis=1).backward(g)
    expected = np.einsum("kj,ikc->ijc", basis.data, g)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-5, atol=1e-6)
    assert basis.grad is None


def test_fixed_shape_mismatch():
    with pytest.raises(ValueError):
        nx.fixed_linear(np.zeros((3, 2)), np.eye(4), axis=0)


# --------------------------------------------------------------------------
# remaining graph ops


def test_conv_and_modulate_grads_match_fd():
    r = np.random.default_rng(21)
    x = r.normal(size=(9, 7, 3))
    w = r.normal(size=(4, 3, 3, 3)) * 0.3
    b = r.normal(size=4)
    sc = r.normal(size=4)
    sh = r.normal(size=4)

    def f(xv, wv, bv, scv, shv):
        return nx.total(nx.mul(nx.modulate(nx.conv3x3_stride2(xv, wv, bv), scv, shv),
                               Tensor(np.linspace(-1, 1, 5 * 4 * 4).reshape(5, 4, 4))))

    with nx.precision(np.float64):
        inputs = [x, w, b, sc, sh]
        for k in range(5):
            ana = _grad_of(f, *inputs, wrt=k)
            num = numeric_grad(lambda v: _value(f, *[v if j == k else inputs[j] for j in range(5)]), inputs[k])
            assert rel_err(ana, num) < 1e-3, k


def test_conv_matches_direct_sum():
    r = np.random.default_rng(4)
    x = r.normal(size=(6, 5, 2))
    w = r.normal(size=(3, 2, 3, 3))
    b = r.normal(size=3)
    with nx.precision(np.float64):
        out = nx.conv3x3_stride2(x, w, b).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for o in range(3):
                ref = b[o] + sum(w[o, c, dy, dx] * xp[2 * i + dy, 2 * j + dx, c]
                                 for c in range(2) for dy in range(3) for dx in range(3))
                assert abs(out[i, j, o] - ref) < 1e-9


def test_spatial_mean_and_reshape_grads():
    r = np.random.default_rng(8)
    x = r.normal(size=(3, 4, 2))
    wts = Tensor(np.array([1.5, -0.5]))
    with nx.precision(np.float64):
        f = lambda t: nx.total(nx.mul(nx.spatial_mean(nx.reshape(t, (4, 3, 2))), wts))
        assert rel_err(_grad_of(f, x), numeric_grad(lambda v: _value(f, v), x)) < 1e-3


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = nx.mul(x, x)
    nx.total(nx.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_tape_visits_each_op_once():
    x = Tensor(np.ones(3), requires_grad=True)
    a = nx.affine(x, 2.0, 0.0)
    b = nx.add(a, a)
    c = nx.mul(b, a)
    tape = nx.GradTape(nx.total(c))
    assert len(tape.ops) == len({id(t) for t in tape.ops}) == 4


def test_no_recording_without_requires_grad(rng):
    out = nx.pointwise_linear(rng.normal(size=(2, 3)), np.eye(3), np.zeros(3))
    assert not out.requires_grad and out.is_leaf


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(50, 3))
    w = rng.normal(size=(8, 3))
    b = rng.normal(size=8)
    a1 = nx.pointwise_linear(x, w, b, act="relu").data
    a2 = nx.pointwise_linear(x, w, b, act="relu").data
    assert a1.tobytes() == a2.tobytes()


def test_gradient_sum_order_independent():
    r = np.random.default_rng(9)
    w = Tensor(r.normal(size=(4, 3)), requires_grad=False)
    xs = [r.normal(size=(10, 3)) for _ in range(5)]
    grads = []
    for x in xs:
        wt = Tensor(w.data, requires_grad=True)
        nx.total(nx.pointwise_linear(x, wt, np.zeros(4), act="sigmoid")).backward()
        grads.append(wt.grad)
    fwd = sum(grads)
    rev = sum(reversed(grads))
    np.testing.assert_allclose(fwd, rev, atol=1e-5)


# --------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = nx.AdamState()
    nx.adam_step(p, {"w": np.zeros(2, np.float32)}, state, lr=1e-3)
    assert np.array_equal(p["w"].data, np.array([1.0, -2.0], np.float32))
    assert np.all(state.m["w"] == 0) and np.all(state.v["w"] == 0) and state.t == 1


def test_adam_first_step_hand_evaluated():
    # m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    p = {"w": Tensor(np.array([0.0]))}
    nx.adam_step(p, {"w": np.ones(1, np.float32)}, nx.AdamState(), lr=1e-5)
    assert p["w"].data[0] == pytest.approx(-1e-5 / (1 + 1e-8), rel=1e-6)


def test_adam_moves_against_gradient_monotonically():
    p = {"w": Tensor(np.array([0.5]))}
    state = nx.AdamState()
    seen = [p["w"].data[0]]
    for _ in range(2):
        nx.adam_step(p, {"w": np.array([-3.0], np.float32)}, state, lr=1e-2)
        seen.append(p["w"].data[0])
    assert seen[0] < seen[1] < seen[2]


def test_adam_rejects_non_finite_without_touching_state():
    p = {"a": Tensor(np.array([1.0])), "b": Tensor(np.array([1.0]))}
    state = nx.AdamState()
    with pytest.raises(nx.NonFiniteGradientError):
        nx.adam_step(p, {"a": np.array([1.0], np.float32), "b": np.array([np.nan], np.float32)}, state, 1e-3)
    assert state.t == 0 and p["a"].data[0] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-3), st.floats(1e-6, 1e-1))
def test_adam_first_step_size_is_lr(g, lr):
    p = {"w": Tensor(np.array([0.0]))}
    nx.adam_step(p, {"w": np.array([g], np.float32)}, nx.AdamState(), lr=lr)
    assert p["w"].data[0] == pytest.approx(-np.sign(g) * lr, rel=1e-4)
