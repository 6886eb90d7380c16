import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focal import nn
from focal.nn import ContractError, DimensionError, GradTape, Mlp, Parameter


def naive_forward(net, x):
    """Triple-loop matmul oracle, independent of numpy's @."""
    h = [list(row) for row in x]
    for k in range(net.n_layers):
        w, b = (p.value for p in net.layer(k))
        out = []
        for row in h:
            o = []
            for j in range(w.shape[1]):
                acc = 0.0
                for i in range(w.shape[0]):
                    acc += row[i] * w[i, j]
                acc += b[j]
                if k < net.n_layers - 1:
                    acc = max(acc, 0.0)
                o.append(acc)
            out.append(o)
        h = out
    return np.array(h)


def test_zero_net_outputs_zero():
    net = Mlp([3, 5, 2], rng=None)
    out = nn.forward(net, np.random.default_rng(0).normal(size=(4, 3)))
    assert np.array_equal(out.value, np.zeros((4, 2)))


def test_identity_layer():
    net = Mlp([3, 3], rng=None)
    net.params[0].value = np.eye(3)
    x = np.array([[1.0, -2.0, 3.5]])
    assert np.array_equal(nn.forward(net, x).value, x)


def test_forward_matches_triple_loop_oracle():
    rng = np.random.default_rng(7)
    net = Mlp([4, 6, 3], rng)
    x = rng.normal(size=(4, 4))
    np.testing.assert_allclose(nn.forward(net, x).value, naive_forward(net, x), atol=1e-12)


def test_forward_dimension_error_names_layer():
    net = Mlp([3, 4, 2], np.random.default_rng(0))
    net.params[2] = Parameter(np.zeros((5, 2)), "bad")  # layer 1 now expects width 5
    with pytest.raises(DimensionError, match="layer 1"):
        nn.forward(net, np.zeros((2, 3)))
    with pytest.raises(DimensionError, match="layer 0"):
        nn.forward(Mlp([3, 2]), np.zeros((2, 4)))


def test_tanh_output_strictly_inside():
    net = Mlp([2, 2], rng=None, output="tanh")
    net.params[0].value = np.full((2, 2), 1e3)
    out = nn.forward(net, np.array([[50.0, 50.0], [-50.0, -50.0]])).value
    assert np.all(np.abs(out) < 1.0)


def test_backward_2x2_by_hand():
    # loss = sum(x @ W) -> dL/dW[i, j] = x[i] for every column j
    x = np.array([[2.0, -3.0]])
    w = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    tape = GradTape()
    loss = (nn.as_tensor(x) @ tape.watch(w)).sum()
    g = nn.backward(tape, loss)[w]
    np.testing.assert_array_equal(g, np.array([[2.0, 2.0], [-3.0, -3.0]]))


def test_backward_rejects_non_scalar():
    w = Parameter(np.ones((2, 2)))
    tape = GradTape()
    with pytest.raises(ContractError):
        nn.backward(tape, tape.watch(w) * 2.0)


def test_detached_parameter_gets_zero_grad():
    net = Mlp([3, 4, 1], np.random.default_rng(1))
    tape = GradTape()
    loss = (nn.forward(net, np.ones((2, 3)), tape, detached=True) ** 2).sum()
    grads = nn.backward(tape, loss)
    assert all(np.all(g == 0) for g in grads.values())
    assert len(grads) == len(net.params)


def _mlp_loss(net, x, y):
    def f():
        out = nn.forward(net, x)
        return float(np.sum((out.value - y) ** 2))

    tape = GradTape()
    out = nn.forward(net, x, tape)
    diff = out - y
    return f, nn.backward(tape, (diff * diff).sum())


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp([3, 5, 4, 2], rng, output="tanh")
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    f, grads = _mlp_loss(net, x, y)
    fd = nn.finite_diff_grad(f, net.params)
    for p in net.params:
        big = np.abs(grads[p]) > 1e-6
        rel = np.abs(grads[p] - fd[p])[big] / np.abs(grads[p])[big]
        assert np.all(rel < 1e-4), p.name


def test_finite_diff_quadratic_and_constant():
    p = Parameter(np.array(3.0))
    g = nn.finite_diff_grad(lambda: float(p.value) ** 2, [p])[p]
    assert abs(float(g) - 6.0) < 1e-8
    q = Parameter(np.ones(4))
    assert np.all(nn.finite_diff_grad(lambda: 1.5, [q])[q] == 0)


def test_elementwise_ops_against_finite_differences():
    rng = np.random.default_rng(3)
    a = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = Parameter(rng.uniform(0.5, 2.0, size=(4,)))

    def build(tape=None):
        ta = tape.watch(a) if tape is not None else nn.Tensor(a.value)
        tb = tape.watch(b) if tape is not None else nn.Tensor(b.value)
        u = nn.exp(ta * -0.3) + nn.log(ta) / tb - nn.sqrt(ta + tb) ** 3
        v = nn.softplus(u) * nn.tanh(tb) + nn.minimum(ta, tb * 1.1)
        w = nn.concat([v, nn.clip(ta, 0.7, 1.5)], axis=0)
        return (w[1:, ::2] * w[1:, 1::2]).mean() + nn.relu(u - 0.1).sum()

    tape = GradTape()
    grads = nn.backward(tape, build(tape))
    fd = nn.finite_diff_grad(lambda: float(build().value), [a, b])
    for p in (a, b):
        np.testing.assert_allclose(grads[p], fd[p], rtol=1e-5, atol=1e-7)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = Parameter(np.array([1.0, -2.0]))
    st_ = nn.AdamState(lr=0.1)
    nn.adam_step([p], {p: np.array([1.0, 1.0])}, st_)
    m_before, v_before = st_.m[p].copy(), st_.v[p].copy()
    nn.adam_step([p], {p: np.zeros(2)}, st_)
    np.testing.assert_allclose(st_.m[p], 0.9 * m_before)
    np.testing.assert_allclose(st_.v[p], 0.999 * v_before)
    assert st_.step == 2
    q = Parameter(np.array([1.0, -2.0]))
    fresh = nn.AdamState(lr=0.1)
    nn.adam_step([q], {q: np.zeros(2)}, fresh)
    np.testing.assert_array_equal(q.value, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([0.5, 0.5, 0.5]))
    g = np.array([3.0, -0.01, 1e-3])
    nn.adam_step([p], {p: g}, nn.AdamState(lr=1e-3))
    # bias-corrected m/sqrt(v) = g/|g| at t = 1
    np.testing.assert_allclose(p.value, 0.5 - 1e-3 * np.sign(g), atol=1e-8)


def test_adam_shape_mismatch():
    p = Parameter(np.zeros(3))
    with pytest.raises(DimensionError):
        nn.adam_step([p], {p: np.zeros(4)}, nn.AdamState(lr=0.1))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        net = Mlp([3, 8, 2], rng)
        x = rng.normal(size=(5, 3))
        state = nn.AdamState(1e-2)
        for _ in range(5):
            tape = GradTape()
            loss = (nn.forward(net, x, tape) ** 2).sum()
            nn.adam_step(net.params, nn.backward(tape, loss), state)
        return [p.value.copy() for p in net.params]

    for u, v in zip(run(), run()):
        assert np.array_equal(u, v)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    nets = {"a": Mlp([3, 4, 2], rng, name="a"), "b": Mlp([2, 5, 1], rng, output="tanh", name="b")}
    nn.save_checkpoint(tmp_path / "ck.bin", nets, {"note": "x"})
    loaded, extra = nn.load_checkpoint(tmp_path / "ck.bin")
    assert extra == {"note": "x"}
    for k in nets:
        assert loaded[k].widths == nets[k].widths and loaded[k].output == nets[k].output
        for p, q in zip(loaded[k].params, nets[k].params):
            assert np.array_equal(p.value, q.value)


def test_soft_update():
    t, o = Parameter(np.zeros(2)), Parameter(np.ones(2))
    nn.soft_update_params([t], [o], 0.25)
    np.testing.assert_array_equal(t.value, [0.25, 0.25])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2))
def test_tanh_output_property(x):
    net = Mlp([2, 4, 3], np.random.default_rng(0), output="tanh")
    out = nn.forward(net, np.array([x])).value
    assert np.all(out > -1.0) and np.all(out < 1.0)
