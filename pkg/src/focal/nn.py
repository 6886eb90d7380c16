"""Dense float64 tensors, a reverse-mode gradient tape, MLPs and Adam.

Every learned function in the package (context encoder, actor, critics) is an
:class:`Mlp` whose parameters live in :class:`Parameter` objects.  A forward
pass that should be differentiated records its operations on a
:class:`GradTape`; :func:`backward` then walks the tape in reverse and returns
gradients keyed by parameter.

Tapes are meant to be used once, for a single optimisation step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

# largest double strictly below 1; keeps tanh outputs inside the open interval
_TANH_BOUND = float(np.nextafter(1.0, 0.0))


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Parameter:
    """A named, trainable float64 array.

    ``value`` is replaced (never mutated in place) by optimisers, so arrays
    captured by earlier forward passes stay valid.
    """

    __slots__ = ("name", "value")

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    """Immutable array value, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "_parents", "_backward", "_param")
    __array_priority__ = 100  # so ndarray <op> Tensor dispatches to Tensor

    def __init__(self, value, tape=None, parents=(), backward=None, param=None):
        self.value = value
        self.tape = tape
        self._parents = parents
        self._backward = backward
        self._param = param

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "constant"
        return f"Tensor(shape={self.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Records differentiable operations for one optimisation step."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.watched: dict[int, tuple[Parameter, bool]] = {}

    def watch(self, param: Parameter, detached: bool = False) -> Tensor:
        """Leaf tensor for ``param``.

        A detached parameter is still reported by :func:`backward`, but its
        gradient is identically zero: the returned tensor is a constant.
        """
        prev = self.watched.get(id(param))
        if prev is not None and prev[1] != detached:
            raise ContractError(f"parameter {param.name!r} watched both detached and attached")
        self.watched[id(param)] = (param, detached)
        if detached:
            return Tensor(param.value)
        leaf = Tensor(param.value, self, (), None, param)
        self.nodes.append(leaf)
        return leaf

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(value, parents, backward) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape, parents, backward)
    tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if exponent == 2:
        return _make(av * av, (a,), lambda g: (2.0 * g * av,))
    return _make(av**exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def square(a) -> Tensor:
    return power(a, 2)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.clip(np.tanh(a.value), -_TANH_BOUND, _TANH_BOUND)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    av = a.value
    return _make(np.logaddexp(0.0, av), (a,), lambda g: (g / (1.0 + np.exp(-av)),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    out = np.where(pick_a, a.value, b.value)
    return _make(out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


# --- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make(np.mean(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape

    basic = all(isinstance(i, (slice, int)) or i is None or i is Ellipsis
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.value[index], (a,), bw)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.tape is not None else None
        gb = np.swapaxes(av, -1, -2) @ g if b.tape is not None else None
        return ga, gb

    return _make(av @ bv, (a, b), bw)


def linear(x, w, b) -> Tensor:
    """x @ w + b with the bias broadcast over leading axes."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xv, wv = x.value, w.value

    def bw(g):
        gx = g @ wv.T if x.tape is not None else None
        if w.tape is None:
            return gx, None, None
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _make(xv @ wv + b.value, (x, w, b), bw)


# --- gradients ----------------------------------------------------------------

def backward(tape: GradTape, loss: Tensor) -> dict[Parameter, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter watched on ``tape``.

    Parameters that were watched detached, or that the loss does not depend
    on, get an all-zero gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {}
    result = {p: np.zeros_like(p.value) for p, _ in tape.watched.values()}
    if loss.tape is tape:
        grads[id(loss)] = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._param is not None:
            result[node._param] = result[node._param] + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or parent.tape is None:
                continue
            pg = _unbroadcast(pg, parent.value.shape)
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return result


def finite_diff_grad(
    f: Callable[[], float], params: Iterable[Parameter], h: float = 1e-5
) -> dict[Parameter, np.ndarray]:
    """Central-difference gradient of ``f`` with respect to each parameter.

    ``f`` takes no arguments and reads the parameters' current values.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for p in params:
        base = p.value
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            p.value = plus
            f_plus = float(f())
            minus = base.copy()
            minus[idx] -= h
            p.value = minus
            f_minus = float(f())
            grad[idx] = (f_plus - f_minus) / (2.0 * h)
        p.value = base
        out[p] = grad
    return out


# --- networks -------------------------------------------------------------------

ACTIVATIONS = {"relu": relu, "tanh": tanh}
OUTPUT_TRANSFORMS = {"identity": None, "tanh": tanh}


class Mlp:
    """Fully connected network with a shared hidden activation.

    Weights are initialised uniformly in (-1/sqrt(fan_in), 1/sqrt(fan_in)),
    biases at zero.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator | None = None,
                 activation: str = "relu", output: str = "identity", name: str = "mlp"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise DimensionError(f"layer widths must be >= 2 positive integers, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if output not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {output!r}")
        self.widths = widths
        self.activation = activation
        self.output = output
        self.name = name
        self.params: list[Parameter] = []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params.append(Parameter(w, f"{name}.W{k}"))
            self.params.append(Parameter(np.zeros(fan_out), f"{name}.b{k}"))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer(self, k: int) -> tuple[Parameter, Parameter]:
        return self.params[2 * k], self.params[2 * k + 1]

    def copy(self, name: str | None = None) -> Mlp:
        clone = Mlp(self.widths, None, self.activation, self.output, name or self.name)
        for dst, src in zip(clone.params, self.params):
            dst.value = src.value.copy()
        return clone

    def values(self) -> list[np.ndarray]:
        return [p.value for p in self.params]

    def __repr__(self):
        return f"Mlp({self.name!r}, widths={self.widths}, output={self.output!r})"


def forward(net: Mlp, x, tape: GradTape | None = None, detached: bool = False) -> Tensor:
    """Apply ``net`` to a batch ``x`` of shape (..., in_dim).

    With a tape, parameters are watched (detached if requested) so the call
    is differentiable; without one the pass is pure numpy.
    """
    x = as_tensor(x)
    act = ACTIVATIONS[net.activation]
    h = x
    for k in range(net.n_layers):
        w, b = net.layer(k)
        if h.value.shape[-1] != w.value.shape[0]:
            raise DimensionError(
                f"{net.name}: layer {k} expects width {w.value.shape[0]}, got {h.value.shape[-1]}")
        if tape is None:
            wt, bt = Tensor(w.value), Tensor(b.value)
        else:
            wt, bt = tape.watch(w, detached), tape.watch(b, detached)
        h = linear(h, wt, bt)
        if k < net.n_layers - 1:
            h = act(h)
    if not np.all(np.isfinite(h.value)):
        raise FloatingPointError(f"{net.name}: non-finite output")
    out = OUTPUT_TRANSFORMS[net.output]
    return h if out is None else out(h)


def soft_update_params(target: Sequence[Parameter], online: Sequence[Parameter], tau: float):
    for t, o in zip(target, online, strict=True):
        if t.value.shape != o.value.shape:
            raise ContractError(f"shape mismatch {t.name}: {t.value.shape} vs {o.value.shape}")
        t.value = (1.0 - tau) * t.value + tau * o.value


# --- optimisation -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = grads[p]
        if g.shape != p.value.shape:
            raise DimensionError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.value.shape}")
        m = state.m.get(p)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        else:
            v = state.v[p]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p] = m
        state.v[p] = v
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --- checkpoints --------------------------------------------------------------------

CHECKPOINT_FORMAT = "focal-checkpoint/1"


def save_checkpoint(path, nets: dict[str, Mlp], extra: dict | None = None):
    """Write networks as a JSON manifest line followed by little-endian float64 data."""
    manifest = {"format": CHECKPOINT_FORMAT, "networks": [], "extra": extra or {}}
    blobs = []
    for key, net in nets.items():
        entry = {"name": key, "widths": net.widths, "activation": net.activation,
                 "output": net.output, "params": []}
        for p in net.params:
            entry["params"].append({"name": p.name, "shape": list(p.value.shape)})
            blobs.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        manifest["networks"].append(entry)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint manifest line")
    manifest = json.loads(head)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    data = np.frombuffer(body, dtype="<f8") if len(body) % 8 == 0 else None
    if data is None:
        raise ValueError(f"{path}: data section length {len(body)} is not a multiple of 8")
    offset = 0
    nets = {}
    for entry in manifest["networks"]:
        net = Mlp(entry["widths"], None, entry["activation"], entry["output"], entry["name"])
        for p, spec in zip(net.params, entry["params"], strict=True):
            n = int(np.prod(spec["shape"]))
            if offset + n > data.size:
                raise ValueError(f"{path}: truncated data at parameter {spec['name']}")
            p.value = data[offset:offset + n].astype(np.float64).reshape(spec["shape"])
            p.name = spec["name"]
            offset += n
        nets[entry["name"]] = net
    if offset != data.size:
        raise ValueError(f"{path}: {data.size - offset} trailing values after last parameter")
    return nets, manifest.get("extra", {})
