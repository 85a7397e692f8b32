import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecosim import nn


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def test_dense_forward_example():
    layer = nn.DenseLayer([[1.0, 2.0]], [0.5], "identity")
    assert nn.dense_forward(layer, [1.0, 1.0])[0] == 3.5
    relu = nn.DenseLayer([[1.0, 2.0]], [-5.0], "relu")
    assert nn.dense_forward(relu, [1.0, 1.0])[0] == 0.0


def test_dense_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.DenseLayer([[1.0, 2.0]], [0.5, 0.1])
    with pytest.raises(nn.ShapeError):
        nn.dense_forward(nn.DenseLayer([[1.0, 2.0]], [0.5]), [1.0, 1.0, 1.0])


def test_cell_with_zero_parameters_halves_the_state():
    cell = nn.GRUCell("c", 2, 3)
    params = {}
    cell.init(params, np.random.default_rng(0))
    for v in params.values():
        v[:] = 0.0
    h = np.array([1.0, -2.0, 0.5])
    # z = 1/2 and the candidate is tanh(0) = 0
    assert np.allclose(nn.cell_forward(cell, params, [3.0, 4.0], h), h / 2)


def test_cell_matches_plain_formula():
    cell = nn.GRUCell("c", 2, 3)
    params = {}
    cell.init(params, np.random.default_rng(1))
    for k in ("c.bz", "c.br", "c.bn"):
        params[k] = np.random.default_rng(2).normal(size=3)
    x, h = np.array([0.3, -0.7]), np.array([0.1, 0.2, -0.4])
    sig = lambda a: 1 / (1 + np.exp(-a))
    P = params
    z = sig(x @ P["c.Wz"] + h @ P["c.Uz"] + P["c.bz"])
    r = sig(x @ P["c.Wr"] + h @ P["c.Ur"] + P["c.br"])
    n = np.tanh(x @ P["c.Wn"] + (r * h) @ P["c.Un"] + P["c.bn"])
    assert np.allclose(nn.cell_forward(cell, params, x, h), (1 - z) * h + z * n, atol=1e-14)


def test_softmax_examples():
    assert np.allclose(nn.softmax([0.0, np.log(2.0)]), [1 / 3, 2 / 3])
    p = nn.softmax([1000.0, 1000.0, -1000.0])
    assert np.all(np.isfinite(p)) and np.allclose(p, [0.5, 0.5, 0.0])
    with pytest.raises(ValueError):
        nn.softmax([1.0], temperature=0.0)


def test_huber_examples():
    assert nn.huber_loss(0.5, 0.0) == (0.125, 0.5)
    assert nn.huber_loss(1.5, 0.0) == (1.0, 1.0)
    assert nn.huber_loss(-3.0, 0.0, delta=2.0) == (4.0, -2.0)


def test_adagrad_step_example():
    params = {"w": np.array([1.0])}
    state = nn.AdagradState(0.1, epsilon=0.0)
    nn.adagrad_step(state, params, {"w": np.array([2.0])})
    assert params["w"][0] == pytest.approx(0.9)
    nn.adagrad_step(state, params, {"w": np.array([2.0])})
    # accumulator 8, step 0.1 * 2 / sqrt(8)
    assert params["w"][0] == pytest.approx(0.9 - 0.2 / np.sqrt(8))
    with pytest.raises(ValueError):
        nn.AdagradState(0.0)


@pytest.mark.parametrize("op", ["relu", "tanh", "sigmoid", "matmul", "mul", "concat",
                                "logsumexp", "pick", "huber", "take_rows", "transpose"])
def test_op_gradients(op):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 3)) + 0.05  # stay off the relu kink
    b = rng.normal(size=(3, 4))
    c = rng.normal(size=(4, 3))

    def forward(tape):
        A = tape.params["a"]
        out = {
            "relu": lambda: nn.relu(A),
            "tanh": lambda: nn.tanh(A),
            "sigmoid": lambda: nn.sigmoid(A),
            "matmul": lambda: A @ tape.const(b),
            "mul": lambda: A * tape.const(c),
            "concat": lambda: nn.concat([A, tape.const(c)], axis=1),
            "logsumexp": lambda: nn.logsumexp_rows(A),
            "pick": lambda: nn.pick(A, np.array([0, 2, 1, 1])),
            "huber": lambda: nn.huber(A, c * 2),
            "take_rows": lambda: nn.take_rows(A, np.array([3, 0, 3])),
            "transpose": lambda: A.T,
        }[op]()
        w = np.random.default_rng(4).normal(size=out.value.shape)
        return nn.total(out * w)

    tape = nn.Tape()
    tape.param("a", a)
    grads = tape.backward(forward(tape))

    def value():
        t = nn.Tape()
        t.param("a", a)
        return float(forward(t).value)

    assert np.allclose(grads["a"], numeric_grad(value, a), atol=1e-7)


def test_take_rows_accumulates_repeated_rows():
    tape = nn.Tape()
    a = tape.param("a", np.ones((3, 2)))
    out = nn.total(nn.take_rows(a, np.array([1, 1, 2])))
    g = tape.backward(out)["a"]
    assert np.array_equal(g, [[0, 0], [2, 2], [1, 1]])


def test_backward_twice_gives_same_gradient():
    tape = nn.Tape()
    a = tape.param("a", np.arange(6.0).reshape(2, 3))
    loss = nn.total(nn.take_rows(a, slice(0, 2)) * a)
    assert np.array_equal(tape.backward(loss)["a"], tape.backward(loss)["a"])


def test_backward_without_parameters_is_a_usage_error():
    tape = nn.Tape()
    x = tape.const([1.0, 2.0])
    with pytest.raises(nn.UsageError):
        tape.backward(nn.total(x))


def test_non_scalar_loss_rejected():
    tape = nn.Tape()
    a = tape.param("a", np.ones(2))
    with pytest.raises(nn.ShapeError):
        tape.backward(a * 2.0)


def test_finite_difference_check_passes_and_catches_bugs():
    params = {"w": np.array([0.3, -1.2, 2.0])}

    def loss(p):
        return float(np.sum(np.sin(p["w"]) * p["w"]))

    w = params["w"]
    good = {"w": np.cos(w) * w + np.sin(w)}
    assert nn.finite_difference_check(loss, params, good).passed
    bad = {"w": good["w"].copy()}
    bad["w"][1] *= 1.01
    report = nn.finite_difference_check(loss, params, bad)
    assert not report.passed and report.worst[0:2] == ("w", 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mlp_gradient_random_points(seed):
    rng = np.random.default_rng(seed)
    mlp = nn.MLP("m", 3, (5, 2))
    params = {}
    mlp.init(params, rng)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.uniform(-0.1, 0.1, size=params[k].shape)
    x = rng.normal(size=(4, 3))

    def run(p, grad):
        tape = nn.Tape()
        for k, v in p.items():
            tape.param(k, v) if grad else tape.params.__setitem__(k, tape.const(v))
        return tape, nn.total(nn.tanh(mlp(tape, tape.const(x))))

    tape, loss = run(params, True)
    grads = tape.backward(loss)
    report = nn.finite_difference_check(lambda p: float(run(p, False)[1].value), params, grads)
    assert report.passed, report


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {"b.x": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "s": np.array(1.5)}
    path = tmp_path / "p.bin"
    nn.save_params(path, params)
    loaded = nn.load_params(path)
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k], params[k])
    assert nn.dump_params(loaded) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        nn.load_params_bytes(b"not a checkpoint at all")
    data = nn.dump_params({"a": np.ones(2)})
    with pytest.raises(ValueError):
        nn.load_params_bytes(data + b"\x00")
