"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operators needed by the head and prediction networks are here:
affine layers, sigmoid / leaky ReLU / tanh, a same-padded 1-D convolution,
a fused LSTM layer, concatenation, reshapes and the L1 loss.

Operations record themselves on the active :class:`Tape`::

    with Tape() as tape:
        loss = l1_loss(sigmoid(linear(x, w, b)), y)
    tape.backward(loss)

Outside a tape, operators just compute values (inference mode).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, TapeConsumedError

DTYPE = np.float64

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations.

    Nodes are appended as they are produced, so the list is already in
    topological order. A tape may be backpropagated exactly once.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Populate ``.grad`` on every leaf reachable through this tape.

        Leaf gradients are overwritten, not accumulated: leaves that appear
        on the tape but are unreachable from ``loss`` end up with zeros.
        """
        if self.consumed:
            raise TapeConsumedError("tape already consumed by an earlier backward()")
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss._tracked:
            raise ValueError("loss was not produced through a tape")
        self.consumed = True

        for node in self.nodes:
            node.grad = None
            for p in node._parents:
                if p.requires_grad and p._backward is None:
                    p.grad = np.zeros_like(p.data)

        loss.grad = np.full_like(loss.data, seed)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for p, g in zip(node._parents, parent_grads):
                if g is None or not p._tracked:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=DTYPE)
                else:
                    p.grad = p.grad + g
        # free intermediate buffers; leaves keep their gradients
        for node in self.nodes:
            if node is not loss:
                node.grad = None
            node._backward = None
            node._parents = ()


def _record(value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(p._tracked for p in parents):
        out._tracked = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite input to {where}")


# --- elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def sigmoid(x: Tensor) -> Tensor:
    _check_finite(x.data, "sigmoid")
    # tanh form: no overflow for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    _check_finite(x.data, "leaky_relu")
    scale = np.where(x.data > 0, 1.0, slope)
    out = x.data * scale

    def backward(g):
        return (g * scale,)

    return _record(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, (x,), backward)


@dataclass(frozen=True)
class Activation:
    """Activation choice: ``Activation("sigmoid")`` or ``Activation("leaky_relu", 0.01)``."""

    kind: str = "sigmoid"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ("sigmoid", "leaky_relu"):
            raise ValueError(f"unknown activation {self.kind!r}")

    @classmethod
    def parse(cls, spec: "str | Activation") -> "Activation":
        if isinstance(spec, Activation):
            return spec
        if spec.startswith("leaky_relu"):
            _, _, arg = spec.partition(":")
            return cls("leaky_relu", float(arg) if arg else 0.01)
        return cls(spec)


def apply_activation(x: Tensor, kind: "str | Activation" = "sigmoid") -> Tensor:
    act = Activation.parse(kind)
    if act.kind == "sigmoid":
        return sigmoid(x)
    return leaky_relu(x, act.slope)


# --- shape ops -------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _record(out, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(g[lo:hi], 0, axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(out, xs, backward)


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; gradients scatter back into a zero buffer."""
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _record(np.array(out), (x,), backward)


# --- reductions / losses ---------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    out = np.array(x.data.sum() / n)

    def backward(g):
        return (np.full(x.shape, g / n),)

    return _record(out, (x,), backward)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = max(diff.size, 1)
    out = np.array(np.abs(diff).sum() / n)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _record(out, (pred, target), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``Σ w_i · t_i`` over scalar tensors."""
    if len(terms) != len(weights):
        raise DimensionError(f"{len(terms)} terms but {len(weights)} weights")
    terms = [as_tensor(t) for t in terms]
    w = [float(x) for x in weights]
    total = 0.0
    for wi, t in zip(w, terms):
        total = total + wi * t.data
    out = np.array(total, dtype=DTYPE)

    def backward(g):
        return tuple(wi * g for wi in w)

    return _record(out, terms, backward)


def inner_const(x: Tensor, v: np.ndarray) -> Tensor:
    """``Σ x ⊙ v`` with ``v`` held constant.

    Backpropagating a unit seed through this node deposits exactly ``v`` on
    ``x``, which is how an externally supplied upstream gradient is injected.
    """
    v = np.asarray(v, dtype=DTYPE)
    if v.shape != x.shape:
        raise DimensionError(f"inner_const shape mismatch: {x.shape} vs {v.shape}")
    out = np.array((x.data * v).sum())

    def backward(g):
        return (v * g,)

    return _record(out, (x,), backward)


# --- layers ----------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (batch, in_dim)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"linear: input {x.shape}, weights {w.shape}, bias {b.shape} do not conform"
        )
    out = x.data @ w.data + b.data

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(out, (x, w, b), backward)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution, kernel width 3, one zero on each side.

    ``x`` is (channels, length) or (batch, channels, length); the output
    keeps the input length.
    """
    if x.ndim == 2:
        out = conv1d_same(reshape(x, (1,) + x.shape), kernel, bias)
        return reshape(out, out.shape[1:])
    if kernel.ndim != 3 or kernel.shape[2] != 3:
        raise DimensionError(f"conv1d_same needs a (out, in, 3) kernel, got {kernel.shape}")
    if x.ndim != 3 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv1d_same: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv1d_same: bias {bias.shape} vs kernel {kernel.shape}")
    length = x.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1)))
    k = kernel.data
    out = np.zeros((x.shape[0], k.shape[0], length))
    for tap in range(3):
        # (b, c, t) x (o, c) -> (b, o, t)
        out += np.einsum("bct,oc->bot", xp[:, :, tap:tap + length], k[:, :, tap])
    out += bias.data[None, :, None]

    def backward(g):
        gk = np.empty_like(k)
        gxp = np.zeros_like(xp)
        for tap in range(3):
            window = xp[:, :, tap:tap + length]
            gk[:, :, tap] = np.einsum("bot,bct->oc", g, window)
            gxp[:, :, tap:tap + length] += np.einsum("bot,oc->bct", g, k[:, :, tap])
        return gxp[:, :, 1:-1], gk, g.sum(axis=(0, 2))

    return _record(out, (x, kernel, bias), backward)


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_layer(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """One LSTM layer over a (batch, steps, in_dim) sequence.

    Gate blocks are ordered input, forget, candidate, output along the
    ``4 * hidden`` axis. Initial hidden and cell states are zero. Returns
    the full hidden sequence (batch, steps, hidden).
    """
    if x.ndim != 3:
        raise DimensionError(f"lstm_layer expects (batch, steps, in_dim), got {x.shape}")
    n_in, four_h = w_ih.shape
    hidden = four_h // 4
    if x.shape[2] != n_in or w_hh.shape != (hidden, four_h) or b.shape != (four_h,):
        raise DimensionError(
            f"lstm_layer: input {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}"
        )
    batch, steps, _ = x.shape
    xs = x.data
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    hs = np.empty((batch, steps, hidden))
    cache = []
    for t in range(steps):
        z = xs[:, t] @ w_ih.data + h @ w_hh.data + b.data
        i = _sig(z[:, :hidden])
        f = _sig(z[:, hidden:2 * hidden])
        gg = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = _sig(z[:, 3 * hidden:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * gg
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((i, f, gg, o, c_prev, h_prev, tc))

    def backward(g):
        gx = np.empty_like(xs)
        gw_ih = np.zeros_like(w_ih.data)
        gw_hh = np.zeros_like(w_hh.data)
        gb = np.zeros_like(b.data)
        dh_next = np.zeros((batch, hidden))
        dc_next = np.zeros((batch, hidden))
        for t in reversed(range(steps)):
            i, f, gg, o, c_prev, h_prev, tc = cache[t]
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [
                    dc * gg * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - gg * gg),
                    dh * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            dc_next = dc * f
            gw_ih += xs[:, t].T @ dz
            gw_hh += h_prev.T @ dz
            gb += dz.sum(axis=0)
            gx[:, t] = dz @ w_ih.data.T
            dh_next = dz @ w_hh.data.T
        return gx, gw_ih, gw_hh, gb

    return _record(hs, (x, w_ih, w_hh, b), backward)


def lstm_forward(x: Tensor, layers: Sequence[tuple[Tensor, Tensor, Tensor]]) -> Tensor:
    """Stacked LSTM; returns the top layer's hidden state at the last step.

    ``x`` is (steps, in_dim) or (batch, steps, in_dim).
    """
    single = x.ndim == 2
    h = reshape(x, (1,) + x.shape) if single else x
    for w_ih, w_hh, b in layers:
        h = lstm_layer(h, w_ih, w_hh, b)
    last = index(h, (slice(None), -1, slice(None)))
    return reshape(last, last.shape[1:]) if single else last


# --- parameters / optimisation ---------------------------------------------------

def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place.

    Raises :class:`NonFiniteError` and leaves everything untouched if any
    gradient contains a NaN or infinity.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError("Adam state does not match the parameter list")
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or '?'}; step rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = state.m[k] / corr1
        v_hat = state.v[k] / corr2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Iterable[Tensor], lr: float = 0.1, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# --- gradient verification -------------------------------------------------------

def finite_difference_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                            coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``coords`` set, only
    that many seeded random coordinates of each input are probed.
    """
    for t in inputs:
        t.requires_grad = True
        t._tracked = True
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ga = ga.reshape(-1)
        probe = range(flat.size)
        if coords is not None and coords < flat.size:
            probe = rng.choice(flat.size, size=coords, replace=False)
        for j in probe:
            orig = flat[j]
            flat[j] = orig + h
            up = f(*inputs).item()
            flat[j] = orig - h
            down = f(*inputs).item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, abs(ga[j] - numeric) / max(1.0, abs(numeric)))
    return worst
