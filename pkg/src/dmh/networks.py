"""Head networks (MLP / CNN / LSTM) and the prediction network."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Activation, Tensor

HEAD_KINDS = ("MLP", "CNN", "LSTM")
MLP_WIDTHS = (256, 64, 16)
LSTM_HIDDEN = 35
LSTM_LAYERS = 2
LSTM_WIDTHS = (64,)
PREDICTION_WIDTHS = (16, 4)


class Module:
    """Anything that owns parameters in a fixed declaration order."""

    def params(self) -> list[Tensor]:
        raise NotImplementedError

    def zero_(self) -> None:
        for p in self.params():
            p.data = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.params()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if a.shape != p.shape:
                raise ValueError(f"parameter {p.name}: shape {a.shape} != {p.shape}")
            p.data = np.array(a, dtype=np.float64)

    def flat(self) -> np.ndarray:
        ps = self.params()
        return np.concatenate([p.data.ravel() for p in ps]) if ps else np.zeros(0)


class Dense(Module):
    """Stack of affine layers; hidden layers use ``activation``, the last one sigmoid."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 activation: Activation = Activation(), prefix: str = "fc"):
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.layers: list[tuple[Tensor, Tensor]] = []
        for k, (fan_in, fan_out) in enumerate(zip(self.widths, self.widths[1:])):
            w = ad.init_uniform(rng, (fan_in, fan_out), fan_in, f"{prefix}{k}.weight")
            b = ad.init_uniform(rng, (fan_out,), fan_in, f"{prefix}{k}.bias")
            self.layers.append((w, b))

    def params(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            x = ad.linear(x, w, b)
            x = ad.sigmoid(x) if k == last else ad.apply_activation(x, self.activation)
        return x


class HeadNetwork(Module):
    """Per-group network mapping an (n_h, W) window to ``out_dim`` values in (0, 1).

    Layouts:

    * ``MLP``: flatten -> 256 -> 64 -> 16 -> out
    * ``CNN``: conv1d(n_h -> n_h, k=3, same) -> flatten -> 256 -> 64 -> 16 -> out
    * ``LSTM``: 2-layer LSTM(n_h -> 35), last step -> 64 -> out
    """

    def __init__(self, kind: str, n_h: int, window: int, out_dim: int, seed: int = 0,
                 activation: "str | Activation" = "sigmoid", group: int = 0):
        kind = kind.upper()
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
        if n_h < 1 or window < 1 or out_dim < 1:
            raise ValueError(f"bad head dims n_h={n_h}, W={window}, out={out_dim}")
        self.kind, self.n_h, self.window, self.out_dim, self.group = kind, n_h, window, out_dim, group
        self.activation = Activation.parse(activation)
        rng = np.random.default_rng(seed)
        self.conv: tuple[Tensor, Tensor] | None = None
        self.lstm: list[tuple[Tensor, Tensor, Tensor]] = []
        if kind == "CNN":
            self.conv = (
                ad.init_uniform(rng, (n_h, n_h, 3), n_h * 3, "conv.weight"),
                ad.init_uniform(rng, (n_h,), n_h * 3, "conv.bias"),
            )
        if kind == "LSTM":
            n_in = n_h
            for layer in range(LSTM_LAYERS):
                self.lstm.append((
                    ad.init_uniform(rng, (n_in, 4 * LSTM_HIDDEN), n_in, f"lstm{layer}.w_ih"),
                    ad.init_uniform(rng, (LSTM_HIDDEN, 4 * LSTM_HIDDEN), LSTM_HIDDEN, f"lstm{layer}.w_hh"),
                    ad.init_uniform(rng, (4 * LSTM_HIDDEN,), LSTM_HIDDEN, f"lstm{layer}.bias"),
                ))
                n_in = LSTM_HIDDEN
            widths = (LSTM_HIDDEN,) + LSTM_WIDTHS + (out_dim,)
        else:
            widths = (n_h * window,) + MLP_WIDTHS + (out_dim,)
        self.dense = Dense(widths, rng, self.activation)

    @property
    def input_shape(self) -> tuple[int, int]:
        return (self.n_h, self.window)

    def params(self) -> list[Tensor]:
        ps: list[Tensor] = []
        if self.conv is not None:
            ps.extend(self.conv)
        for layer in self.lstm:
            ps.extend(layer)
        return ps + self.dense.params()

    def __call__(self, window: "Tensor | np.ndarray") -> Tensor:
        x = ad.as_tensor(window)
        single = x.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1:] != self.input_shape:
            raise ad.DimensionError(f"head expects windows of shape {self.input_shape}, got {x.shape[1:]}")
        batch = x.shape[0]
        if self.kind == "CNN":
            x = ad.apply_activation(ad.conv1d_same(x, *self.conv), self.activation)
        if self.kind == "LSTM":
            x = ad.transpose(x, (0, 2, 1))
            x = ad.apply_activation(ad.lstm_forward(x, self.lstm), self.activation)
        else:
            x = ad.reshape(x, (batch, self.n_h * self.window))
        out = self.dense(x)
        return ad.reshape(out, (self.out_dim,)) if single else out


class PredictionNetwork(Module):
    """input_dim -> 16 -> 4 -> 1."""

    def __init__(self, input_dim: int, seed: int = 0, activation: "str | Activation" = "sigmoid"):
        if input_dim < 1:
            raise ValueError("prediction network needs input_dim >= 1")
        self.input_dim = input_dim
        self.activation = Activation.parse(activation)
        self.dense = Dense((input_dim,) + PREDICTION_WIDTHS + (1,), np.random.default_rng(seed),
                           self.activation, prefix="pred")

    def params(self) -> list[Tensor]:
        return self.dense.params()

    def __call__(self, x: "Tensor | np.ndarray") -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.DimensionError(f"prediction network expects (batch, {self.input_dim}), got {x.shape}")
        out = self.dense(x)
        return ad.reshape(out, (x.shape[0],))


def head_output_dim(mode: str, n_h: int) -> int:
    mode = mode.upper()
    if mode == "T":
        return n_h
    if mode == "E":
        return 1
    raise ValueError(f"unknown DMH mode {mode!r}")


def build_head(kind: str, n_h: int, window: int, mode: str, seed: int = 0,
               activation: "str | Activation" = "sigmoid", group: int = 0) -> HeadNetwork:
    return HeadNetwork(kind, n_h, window, head_output_dim(mode, n_h), seed, activation, group)


def head_forward(net: HeadNetwork, window) -> Tensor:
    return net(window)


def build_prediction_network(input_dim: int, seed: int = 0,
                             activation: "str | Activation" = "sigmoid") -> PredictionNetwork:
    return PredictionNetwork(input_dim, seed, activation)


def count_parameters(net: "Module | Iterable[Tensor] | None") -> int:
    if net is None:
        return 0
    params = net.params() if isinstance(net, Module) else list(net)
    return int(sum(p.size for p in params))
