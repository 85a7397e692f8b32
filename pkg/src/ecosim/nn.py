"""Small reverse-mode differentiation kernel over numpy arrays.

Only the operations the agent's models need: dense layers, a gated
recurrent cell, softmax / log-sum-exp, Huber loss and Adagrad.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


class Var:
    __slots__ = ("value", "grad", "tape", "parents", "backward_fn", "requires_grad", "name",
                 "grad_owned")

    def __init__(self, value, tape=None, parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.grad_owned = False  # grad is a private buffer that may be updated in place
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Execution record of a forward pass; ``backward`` replays it in reverse."""

    def __init__(self):
        self.nodes: list = []
        self.params: dict = {}

    def param(self, name: str, array: np.ndarray) -> Var:
        v = Var(array, self, requires_grad=True, name=name)
        self.params[name] = v
        return v

    def const(self, array) -> Var:
        return Var(np.asarray(array, dtype=float), self)

    def _record(self, value, parents, backward_fn) -> Var:
        req = any(p.requires_grad for p in parents)
        v = Var(value, self, parents if req else (), backward_fn if req else None, req)
        if req:
            self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> dict:
        """Gradients of scalar ``loss`` with respect to every registered parameter."""
        if loss.tape is not self or not any(p.requires_grad for p in self.params.values()):
            raise UsageError("backward called without a recorded forward pass")
        if np.size(loss.value) != 1:
            raise ShapeError("loss must be a scalar")
        for n in self.nodes:
            n.grad, n.grad_owned = None, False
        for p in self.params.values():
            p.grad, p.grad_owned = None, False
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for name, p in self.params.items() if p.requires_grad}


def _as_var(x, tape) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=float), tape)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return Tape()


def _accumulate(v: Var, g):
    if not v.requires_grad:
        return
    g = _unbroadcast(g, v.value.shape)
    if v.grad is None:
        v.grad, v.grad_owned = g, False
    else:
        v.grad, v.grad_owned = v.grad + g, True


def _accumulate_rows(v: Var, idx, g):
    """v.grad[idx] += g without materializing a full-size gradient per call."""
    if not v.requires_grad:
        return
    if v.grad is None:
        v.grad = np.zeros_like(v.value)
    elif not v.grad_owned:
        v.grad = v.grad.copy()
    v.grad_owned = True
    if isinstance(idx, slice):
        v.grad[idx] += g
    else:
        np.add.at(v.grad, idx, g)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(a, tape), _as_var(b, tape)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return tape._record(a.value + b.value, (a, b), bw)


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(a, tape), _as_var(b, tape)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return tape._record(a.value - b.value, (a, b), bw)


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(a, tape), _as_var(b, tape)

    def bw(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)
    return tape._record(a.value * b.value, (a, b), bw)


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(a, tape), _as_var(b, tape)
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul shapes {a.value.shape} and {b.value.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)
    return tape._record(a.value @ b.value, (a, b), bw)


def transpose(a: Var) -> Var:
    return a.tape._record(a.value.T, (a,), lambda g: _accumulate(a, g.T))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: _accumulate(a, g * mask))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape._record(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape._record(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def concat(xs, axis: int = -1) -> Var:
    tape = _tape_of(*xs)
    xs = [_as_var(x, tape) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
            _accumulate(x, piece)
    return tape._record(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), bw)


def take_rows(a: Var, idx) -> Var:
    """Rows ``a[idx]``; ``idx`` may be an index array or a slice."""
    if not isinstance(idx, slice):
        idx = np.asarray(idx, dtype=np.int64)
    return a.tape._record(a.value[idx], (a,), lambda g: _accumulate_rows(a, idx, g))


def pick(a: Var, idx) -> Var:
    """a[i, idx[i]] for each row i."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(len(idx))

    def bw(g):
        full = np.zeros_like(a.value)
        full[rows, idx] = g
        _accumulate(a, full)
    return a.tape._record(a.value[rows, idx], (a,), bw)


def total(a: Var) -> Var:
    return a.tape._record(np.sum(a.value), (a,), lambda g: _accumulate(a, np.full_like(a.value, g)))


def mean(a: Var) -> Var:
    n = a.value.size
    return a.tape._record(np.mean(a.value), (a,),
                          lambda g: _accumulate(a, np.full_like(a.value, g / n)))


def logsumexp_rows(a: Var) -> Var:
    m = a.value.max(axis=1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=1, keepdims=True)
    y = (m + np.log(s))[:, 0]
    p = e / s
    return a.tape._record(y, (a,), lambda g: _accumulate(a, g[:, None] * p))


def huber(pred: Var, target, delta: float = 1.0) -> Var:
    """Elementwise Huber loss of ``pred`` against a constant target."""
    e = pred.value - np.asarray(target, dtype=float)
    quad = np.abs(e) <= delta
    y = np.where(quad, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))
    de = np.where(quad, e, delta * np.sign(e))
    return pred.tape._record(y, (pred,), lambda g: _accumulate(pred, g * de))


# ---------------------------------------------------------------------------
# Plain-array reference functions
# ---------------------------------------------------------------------------

ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "identity": lambda x: x,
}
_VAR_ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": lambda x: x}


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def huber_loss(pred: float, target: float, delta: float = 1.0):
    """Return (loss, d loss / d pred)."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    e = pred - target
    if abs(e) <= delta:
        return 0.5 * e * e, e
    return delta * (abs(e) - 0.5 * delta), delta * float(np.sign(e))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=float))
        self.bias = np.asarray(self.bias, dtype=float)
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("bias length must equal the layer's output dim")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.weight.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != layer input dim {layer.weight.shape[1]}")
    return ACTIVATIONS[layer.activation](x @ layer.weight.T + layer.bias)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# Layers bound to a named parameter dictionary
# ---------------------------------------------------------------------------


class Dense:
    """x @ W + b with an activation. Weights stored (in, out) for batched rows."""

    def __init__(self, name: str, n_in: int, n_out: int, activation: str = "relu",
                 bias: bool = True):
        self.name, self.n_in, self.n_out, self.activation = name, n_in, n_out, activation
        self.bias = bias

    def init(self, params: dict, rng):
        params[f"{self.name}.W"] = glorot(rng, self.n_in, self.n_out)
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.n_out)

    def __call__(self, tape: Tape, x: Var) -> Var:
        if x.value.shape[-1] != self.n_in:
            raise ShapeError(f"{self.name}: input dim {x.value.shape[-1]} != {self.n_in}")
        y = x @ tape.params[f"{self.name}.W"]
        if self.bias:
            y = y + tape.params[f"{self.name}.b"]
        return _VAR_ACTIVATIONS[self.activation](y)

    def layer(self, params: dict) -> DenseLayer:
        b = params[f"{self.name}.b"] if self.bias else np.zeros(self.n_out)
        return DenseLayer(params[f"{self.name}.W"].T, b, self.activation)


class MLP:
    def __init__(self, name: str, n_in: int, sizes, out_activation: str = "identity",
                 out_bias: bool = True):
        dims = [n_in, *sizes]
        last = len(sizes) - 1
        self.layers = [
            Dense(f"{name}.{i}", dims[i], dims[i + 1],
                  "relu" if i < last else out_activation, bias=out_bias or i < last)
            for i in range(len(sizes))
        ]
        self.n_in, self.n_out = n_in, dims[-1]

    def init(self, params, rng):
        for layer in self.layers:
            layer.init(params, rng)

    def __call__(self, tape, x):
        for layer in self.layers:
            x = layer(tape, x)
        return x


class GRUCell:
    """Gated recurrent cell with update, reset and candidate transforms.

    z = sigmoid(x Wz + h Uz + bz); r = sigmoid(x Wr + h Ur + br)
    n = tanh(x Wn + (r * h) Un + bn); h' = (1 - z) * h + z * n
    """

    GATES = ("z", "r", "n")

    def __init__(self, name: str, n_in: int, n_hidden: int):
        self.name, self.n_in, self.n_hidden = name, n_in, n_hidden

    def init(self, params, rng):
        for g in self.GATES:
            params[f"{self.name}.W{g}"] = glorot(rng, self.n_in, self.n_hidden)
            params[f"{self.name}.U{g}"] = glorot(rng, self.n_hidden, self.n_hidden)
            params[f"{self.name}.b{g}"] = np.zeros(self.n_hidden)

    def zero_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.n_hidden))

    def __call__(self, tape: Tape, x: Var, h: Var) -> Var:
        if x.value.shape[-1] != self.n_in or h.value.shape[-1] != self.n_hidden:
            raise ShapeError(f"{self.name}: got x {x.value.shape}, h {h.value.shape}")
        P = tape.params
        n = self.name
        z = sigmoid(x @ P[f"{n}.Wz"] + h @ P[f"{n}.Uz"] + P[f"{n}.bz"])
        r = sigmoid(x @ P[f"{n}.Wr"] + h @ P[f"{n}.Ur"] + P[f"{n}.br"])
        c = tanh(x @ P[f"{n}.Wn"] + (r * h) @ P[f"{n}.Un"] + P[f"{n}.bn"])
        return h + z * (c - h)


def bind(tape: Tape, params: dict, prefix: str = "") -> Tape:
    for name, value in params.items():
        if name.startswith(prefix):
            tape.param(name, value)
    return tape


def cell_forward(cell: GRUCell, params: dict, x, h_prev) -> np.ndarray:
    """Plain forward of one recurrent step (no gradient recording)."""
    tape = bind(Tape(), params, cell.name)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = np.atleast_2d(np.asarray(h_prev, dtype=float))
    out = cell(tape, tape.const(x), tape.const(h)).value
    return out[0] if np.ndim(h_prev) == 1 else out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdagradState:
    learning_rate: float
    epsilon: float = 1e-8
    accumulators: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def adagrad_step(state: AdagradState, params: dict, grads: dict) -> dict:
    """acc += g^2; theta -= lr * g / (sqrt(acc) + eps). Updates ``params`` in place."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: param {p.shape} vs grad {g.shape}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p)
        acc += g * g
        p -= state.learning_rate * g / (np.sqrt(acc) + state.epsilon)
    return params


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[tuple]
    n_checked: int
    tolerance: float
    n_retried: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(loss_fn: Callable[[dict], float], params: dict, grads: dict,
                            tolerance: float = 1e-4, h: float = 1e-5,
                            max_per_tensor: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    ``max_per_tensor`` samples that many coordinates per tensor. A coordinate
    that fails is retried once with step h / 100: a stencil straddling a ReLU
    kink recovers, a wrong gradient does not. Retries are counted in the report.
    """
    rng = rng or np.random.default_rng(0)
    worst, max_err, count, retried = None, 0.0, 0, 0

    def central(flat, i, step):
        old = flat[i]
        flat[i] = old + step
        up = loss_fn(params)
        flat[i] = old - step
        down = loss_fn(params)
        flat[i] = old
        return (up - down) / (2 * step)

    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        g = grads[name].reshape(-1)
        for i in idx:
            num = central(flat, i, h)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8)
            if err >= tolerance:
                retried += 1
                num = central(flat, i, h / 100)
                err = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8)
            count += 1
            if err > max_err:
                max_err, worst = err, (name, int(i), float(g[i]), float(num))
    return GradCheckReport(max_err, worst, count, tolerance, retried)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"ECOSIMP\x00"
FORMAT_VERSION = 1


def dump_params(params: dict) -> bytes:
    names = sorted(params)
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(names))]
    for name in names:
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        out.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return b"".join(out)


def load_params_bytes(data: bytes) -> dict:
    if data[:8] != MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off: off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return params


def save_params(path, params: dict):
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def load_params(path) -> dict:
    with open(path, "rb") as fh:
        return load_params_bytes(fh.read())
