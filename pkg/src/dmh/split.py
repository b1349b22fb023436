"""Split training: head networks on the client, prediction network on the server.

Per training step the client sends one Forward frame holding the head
outputs of a batch followed by the batch's normalised labels. The server
runs the prediction network, takes an Adam step on it and answers with a
Grad frame (dL_0 / d head outputs) and a Metric frame (L_0). The client adds
its own weighted head losses and finishes backpropagation locally.

Session message flow::

    client                                  server
    Init [mode, width, labels, lr, seed, act, slope, restore]  ->  <- Init []
    Forward [acts..., labels...]            ->  <- Grad [dL0/dacts...], Metric [L0]
    Metric [epoch]                          ->  <- Metric [mean L0 of the epoch]
    Close []                                ->  <- Close []

An Init with ``labels = 0`` switches the session to inference: Forward then
carries activations only and the server replies with a Metric frame of
normalised predictions.
"""
from __future__ import annotations

import logging
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .data import Trial
from .engine import (Checkpoint, DmhModel, EpochLog, LossRecord, TrainConfig, batch_indices,
                     build_windows, make_heads, make_predictor, update_multipliers)
from .errors import NonFiniteError, ProtocolError
from .features import DEFAULT_THRESHOLDS, GroupSpec, Normalizer, WindowBatch, correlations, group_features
from .networks import PredictionNetwork
from .protocol import (DOWN, UP, InProcessTransport, MsgType, TransmissionLedger,
                       Transport, WireMessage, decode_message, encode_message, serve_stream,
                       socketpair_transport)

log = logging.getLogger(__name__)

MODE_CODES = {"T": 0.0, "E": 1.0}
ACT_CODES = {"sigmoid": 0.0, "leaky_relu": 1.0}


def _close_frame(client_id: int, step: int, error: bool) -> bytes:
    return encode_message(WireMessage(MsgType.CLOSE, client_id, step, [1.0] if error else []))


# --- server -----------------------------------------------------------------------

@dataclass
class _Predictor:
    net: PredictionNetwork
    opt: Adam
    lock: threading.Lock = field(default_factory=threading.Lock)
    best_state: list[np.ndarray] | None = None
    best_loss: float = float("inf")
    best_epoch: int = 0


@dataclass
class ServerSession:
    client_id: int
    mode: str
    width: int
    with_labels: bool
    predictor: _Predictor
    epoch_losses: list[float] = field(default_factory=list)
    history: list[float] = field(default_factory=list)


class SplitServer:
    """Holds prediction networks and answers client frames.

    By default each client session gets its own prediction network; with
    ``shared=True`` every session trains one network, applying client
    gradients in arrival order.
    """

    def __init__(self, shared: bool = False):
        self.shared = shared
        self.sessions: dict[int, ServerSession] = {}
        self._shared: _Predictor | None = None
        self._lock = threading.Lock()
        self.closed: dict[int, str] = {}

    # frames in, frames out
    def handle(self, frame: bytes) -> list[bytes]:
        try:
            msg = decode_message(frame)
        except ProtocolError as exc:
            log.warning("undecodable frame: %s", exc)
            return [_close_frame(0, 0, True)]
        try:
            if msg.msg_type == MsgType.INIT:
                return self._init(msg)
            session = self.sessions.get(msg.client_id)
            if session is None:
                raise ProtocolError(f"no session for client {msg.client_id}")
            if msg.msg_type == MsgType.FORWARD:
                return self._forward(session, msg)
            if msg.msg_type == MsgType.METRIC:
                return self._epoch_end(session, msg)
            if msg.msg_type == MsgType.CLOSE:
                self._drop(msg.client_id, "closed by client")
                return [_close_frame(msg.client_id, msg.step, False)]
            raise ProtocolError(f"client may not send {msg.msg_type.name}")
        except ProtocolError as exc:
            log.warning("client %d: %s; session closed", msg.client_id, exc)
            self._drop(msg.client_id, str(exc))
            return [_close_frame(msg.client_id, msg.step, True)]

    def _drop(self, client_id: int, reason: str) -> None:
        with self._lock:
            self.sessions.pop(client_id, None)
            self.closed[client_id] = reason

    def _init(self, msg: WireMessage) -> list[bytes]:
        if msg.n_floats != 8:
            raise ProtocolError(f"Init carries 8 floats, got {msg.n_floats}")
        mode_code, width, labels, lr, seed, act, slope, restore = msg.payload.tolist()
        mode = {0.0: "T", 1.0: "E"}.get(mode_code)
        if mode is None or width < 1 or width != int(width):
            raise ProtocolError(f"bad Init payload {msg.payload.tolist()}")
        activation = "sigmoid" if act == 0.0 else f"leaky_relu:{slope}"
        with self._lock:
            session = self.sessions.get(msg.client_id)
            if session is None:
                if self.shared and self._shared is not None:
                    pred = self._shared
                    if pred.net.input_dim != int(width):
                        raise ProtocolError(f"shared predictor takes {pred.net.input_dim} inputs, client sends {int(width)}")
                else:
                    net = make_predictor(int(width), int(seed), activation)
                    pred = _Predictor(net, Adam(net.params(), lr=lr))
                    if self.shared:
                        self._shared = pred
                session = ServerSession(msg.client_id, mode, int(width), bool(labels), pred)
                self.sessions[msg.client_id] = session
            elif session.width != int(width) or session.mode != mode:
                raise ProtocolError("re-Init may not change mode or width")
            session.with_labels = bool(labels)
        if restore and session.predictor.best_state is not None:
            with session.predictor.lock:
                session.predictor.net.load_state(session.predictor.best_state)
        return [encode_message(WireMessage(MsgType.INIT, msg.client_id, msg.step))]

    def _forward(self, session: ServerSession, msg: WireMessage) -> list[bytes]:
        row = session.width + (1 if session.with_labels else 0)
        if msg.n_floats == 0 or msg.n_floats % row:
            raise ProtocolError(f"Forward payload of {msg.n_floats} floats does not fit rows of {row}")
        batch = msg.n_floats // row
        acts = msg.payload[:batch * session.width].reshape(batch, session.width)
        pred = session.predictor
        if not session.with_labels:
            with pred.lock:
                out = pred.net(acts).data
            return [encode_message(WireMessage(MsgType.METRIC, msg.client_id, msg.step, out))]

        labels = msg.payload[batch * session.width:]
        with pred.lock:
            x = Tensor(acts, requires_grad=True)
            with Tape() as tape:
                l0 = ad.l1_loss(pred.net(x), labels)
            if not np.isfinite(l0.item()):
                raise ProtocolError("non-finite loss on server")
            tape.backward(l0)
            try:
                pred.opt.step()
            except NonFiniteError as exc:
                raise ProtocolError(str(exc)) from exc
            grad = x.grad
        session.epoch_losses.append(l0.item())
        return [
            encode_message(WireMessage(MsgType.GRAD, msg.client_id, msg.step, grad)),
            encode_message(WireMessage(MsgType.METRIC, msg.client_id, msg.step, [l0.item()])),
        ]

    def _epoch_end(self, session: ServerSession, msg: WireMessage) -> list[bytes]:
        if not session.epoch_losses:
            raise ProtocolError("epoch end without any training step")
        mean0 = float(np.mean(session.epoch_losses))
        session.epoch_losses = []
        session.history.append(mean0)
        pred = session.predictor
        if mean0 < pred.best_loss:
            with pred.lock:
                pred.best_state = pred.net.state()
            pred.best_loss = mean0
            pred.best_epoch = int(msg.payload[0]) if msg.n_floats else 0
        return [encode_message(WireMessage(MsgType.METRIC, msg.client_id, msg.step, [mean0]))]

    def predictor_for(self, client_id: int) -> PredictionNetwork:
        return self.sessions[client_id].predictor.net

    # network endpoint
    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0) -> socketserver.ThreadingTCPServer:
        """Start a threaded TCP endpoint; returns the server (``.server_address`` has the port)."""
        handle = self.handle

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                serve_stream(handle, self.request)

        tcp = socketserver.ThreadingTCPServer((host, port), Handler)
        tcp.daemon_threads = True
        threading.Thread(target=tcp.serve_forever, daemon=True).start()
        return tcp


# --- client -----------------------------------------------------------------------

class SplitClient:
    """Owns the trials, grouping, scaling and head networks of one vehicle."""

    def __init__(self, client_id: int, trials: Sequence[Trial], mode: str, head_kind: str = "MLP",
                 window: int = 5, horizon: int = 1, thresholds=DEFAULT_THRESHOLDS, seed: int = 0,
                 activation: str = "sigmoid", lr: float = 0.1, signed: bool = False):
        self.client_id = client_id
        self.trials = list(trials)
        self.mode, self.head_kind = mode.upper(), head_kind.upper()
        self.window, self.horizon, self.seed, self.activation = window, horizon, seed, activation
        coeffs, _ = correlations(self.trials)
        self.spec: GroupSpec = group_features(coeffs, thresholds, signed=signed,
                                              feature_names=self.trials[0].feature_names)
        self.normalizer = Normalizer.fit(self.trials)
        self.heads = make_heads(self.mode, self.head_kind, self.spec, window, seed, activation)
        self.lr = lr
        self.opt = Adam(self.head_params(), lr=lr)
        self.multipliers = [1.0] * (len(self.heads) + 1)
        self.ledger = TransmissionLedger()
        self.transport: Transport | None = None
        self.step = 0
        self.best_state: list[np.ndarray] | None = None
        self.best_loss = float("inf")
        self.best_epoch = 0

    # DmhModel-compatible views, used by build_windows
    @property
    def groups(self) -> list[list[int]]:
        return self.spec.groups

    @property
    def width(self) -> int:
        return sum(h.out_dim for h in self.heads)

    def head_params(self) -> list[Tensor]:
        return [p for h in self.heads for p in h.params()]

    def head_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.head_params()]

    def load_head_state(self, arrays: Sequence[np.ndarray]) -> None:
        for p, a in zip(self.head_params(), arrays):
            p.data = np.array(a)

    # wire helpers
    def _send(self, msg: WireMessage, samples: int = 0, labels: int = 0) -> None:
        data = encode_message(msg)
        self.transport.send(data)
        self.ledger.record(UP, msg, len(data), samples, labels)

    def _recv(self, expected: MsgType) -> WireMessage:
        data = self.transport.recv()
        msg = decode_message(data)
        self.ledger.record(DOWN, msg, len(data))
        if msg.msg_type == MsgType.CLOSE and expected != MsgType.CLOSE:
            raise ProtocolError(f"server closed the session (client {self.client_id})")
        if msg.msg_type != expected:
            raise ProtocolError(f"expected {expected.name}, got {msg.msg_type.name}")
        return msg

    def connect(self, transport: Transport, with_labels: bool = True, restore_best: bool = False) -> None:
        self.transport = transport
        act = self.activation if isinstance(self.activation, str) else "sigmoid"
        kind, _, slope = act.partition(":")
        payload = [MODE_CODES[self.mode], self.width, 1.0 if with_labels else 0.0, self.lr, self.seed,
                   ACT_CODES[kind], float(slope) if slope else 0.01, 1.0 if restore_best else 0.0]
        self._send(WireMessage(MsgType.INIT, self.client_id, self.step, payload))
        self._recv(MsgType.INIT)

    def head_targets(self, batch: WindowBatch) -> list[np.ndarray]:
        if self.mode == "T":
            return batch.feature_targets
        return [batch.power.reshape(-1, 1)] * len(self.heads)

    def training_step(self, batch: WindowBatch) -> tuple[float, list[float]]:
        """One request/reply exchange; heads are only updated once the Grad arrives."""
        with Tape() as tape:
            outs = [head(x) for head, x in zip(self.heads, batch.inputs)]
            head_losses = [ad.l1_loss(o, t) for o, t in zip(outs, self.head_targets(batch))]
            acts = ad.concat(outs, axis=1)
        payload = np.concatenate([acts.data.ravel(), batch.power])
        self.step += 1
        self._send(WireMessage(MsgType.FORWARD, self.client_id, self.step, payload),
                   samples=len(batch), labels=len(batch))
        grad = self._recv(MsgType.GRAD).payload.reshape(acts.shape)
        l0 = float(self._recv(MsgType.METRIC).payload[0])
        with tape:
            injected = ad.inner_const(acts, grad)
            total = ad.weighted_sum([*head_losses, injected], [*self.multipliers[1:], 1.0])
        tape.backward(total)
        self.opt.step()
        return l0, [h.item() for h in head_losses]

    def end_epoch(self, epoch: int) -> float:
        self.step += 1
        self._send(WireMessage(MsgType.METRIC, self.client_id, self.step, [float(epoch)]))
        return float(self._recv(MsgType.METRIC).payload[0])

    def train(self, config: TrainConfig) -> list[EpochLog]:
        history = []
        for epoch in range(1, config.epochs + 1):
            history.extend(_train_one_epoch(self, config, epoch))
        return history

    def predict(self, trials: Sequence[Trial]) -> np.ndarray:
        """Denormalised predictions obtained through the server (inference session)."""
        preds = []
        for t in trials:
            batch = build_windows(self, [t])
            outs = [head(x) for head, x in zip(self.heads, batch.inputs)]
            acts = np.concatenate([o.data for o in outs], axis=1)
            self.step += 1
            self._send(WireMessage(MsgType.FORWARD, self.client_id, self.step, acts.ravel()),
                       samples=len(batch))
            preds.append(self.normalizer.invert_target(self._recv(MsgType.METRIC).payload))
        return np.concatenate(preds)

    def close(self) -> None:
        if self.transport is None:
            return
        self.step += 1
        self._send(WireMessage(MsgType.CLOSE, self.client_id, self.step))
        self._recv(MsgType.CLOSE)
        self.transport.close()
        self.transport = None


def client_training_step(client: SplitClient, batch: WindowBatch) -> dict:
    """Run one exchange and return the ledger delta it produced."""
    before = client.ledger.summary()
    client.training_step(batch)
    after = client.ledger.summary()
    return {k: after[k] - before[k] for k in after}


def server_training_step(server: SplitServer, forward: WireMessage) -> WireMessage:
    """Process one Forward frame and return the Grad reply."""
    for frame in server.handle(encode_message(forward)):
        msg = decode_message(frame)
        if msg.msg_type in (MsgType.GRAD, MsgType.CLOSE):
            if msg.msg_type == MsgType.CLOSE:
                raise ProtocolError(server.closed.get(forward.client_id, "session closed"))
            return msg
    raise ProtocolError("server produced no Grad reply")


def transmission_ratio(ledger: TransmissionLedger, n_features: int, window: int, mode: str | None = None,
                       n_heads: int | None = None) -> float:
    """Client->server activation floats per sample over the ``M * W`` raw-window floats.

    Labels are excluded. With ``mode`` given, the measured width is checked
    against M (``"T"``) or ``n_heads`` (``"E"``).
    """
    per_sample = ledger.forward_floats_per_sample()
    if mode is not None:
        expected = n_features if mode.upper() == "T" else n_heads
        if expected is not None and per_sample != expected:
            raise ValueError(f"measured {per_sample} floats per sample, mode {mode} implies {expected}")
    return per_sample / (n_features * window)


# --- orchestration ----------------------------------------------------------------

@dataclass
class ClientRun:
    client: SplitClient
    history: list[EpochLog]
    final_heads: list[np.ndarray]
    final_predictor: list[np.ndarray]
    best_predictor: list[np.ndarray] = field(default_factory=list)

    @property
    def ledger(self) -> TransmissionLedger:
        return self.client.ledger

    def flat_parameters(self) -> np.ndarray:
        """Head parameters then prediction-network parameters, as ``DmhModel.params()`` orders them."""
        return np.concatenate([a.ravel() for a in self.final_heads + self.final_predictor])

    def assemble(self, best: bool = True) -> DmhModel:
        """Offline copy of the split model, e.g. for evaluation with :func:`engine.evaluate`."""
        c = self.client
        model = DmhModel(c.mode, c.head_kind, c.spec, c.window, c.horizon, c.seed, c.activation, c.normalizer)
        if best:
            model.load_state(c.best_state + self.best_predictor)
        else:
            model.load_state(self.final_heads + self.final_predictor)
        return model

    def checkpoint(self) -> Checkpoint:
        model = self.assemble(best=True)
        return Checkpoint(model, model.state(), self.client.best_epoch, self.client.best_loss,
                          list(model.multipliers))


@dataclass
class SplitRun:
    server: SplitServer
    clients: list[ClientRun]


def run_split_training(client_trials: Sequence[Sequence[Trial]], mode: str, head_kind: str = "MLP",
                       config: TrainConfig = TrainConfig(), transport: str = "inprocess", window: int = 5,
                       horizon: int = 1, thresholds=DEFAULT_THRESHOLDS, activation: str = "sigmoid",
                       shared: bool = False, server: SplitServer | None = None) -> SplitRun:
    """Train one session per client; epochs of different clients run one after another.

    Client ``k`` uses seed ``config.seed + k`` for its networks and batch order.
    ``transport`` is ``"inprocess"`` (direct calls) or ``"stream"`` (framed
    bytes over a local socket pair served by a background thread).
    """
    server = server or SplitServer(shared=shared)
    clients = []
    for k, trials in enumerate(client_trials):
        client = SplitClient(k, trials, mode, head_kind, window, horizon, thresholds, config.seed + k,
                             activation, config.lr)
        if transport in ("inprocess", "sim"):
            client.connect(InProcessTransport(server.handle))
        elif transport == "stream":
            client.connect(socketpair_transport(server.handle)[0])
        else:
            raise ValueError(f"unknown transport {transport!r}")
        clients.append(client)

    histories: list[list[EpochLog]] = [[] for _ in clients]
    # run epoch-by-epoch so several clients interleave on the server
    for epoch in range(1, config.epochs + 1):
        for k, client in enumerate(clients):
            cfg = TrainConfig(**{**config.__dict__, "seed": config.seed + k})
            histories[k].extend(_train_one_epoch(client, cfg, epoch))

    runs = []
    for k, client in enumerate(clients):
        pred = server.sessions[client.client_id].predictor
        runs.append(ClientRun(client, histories[k], client.head_state(), pred.net.state(),
                              [a.copy() for a in (pred.best_state or pred.net.state())]))
    return SplitRun(server, runs)


def _train_one_epoch(client: SplitClient, config: TrainConfig, epoch: int) -> list[EpochLog]:
    # lazily create the per-client loop state so interleaved epochs continue where they stopped
    state = getattr(client, "_loop", None)
    if state is None:
        data = build_windows(client, client.trials)
        sizes = [len(t) - client.window - client.horizon + 1 for t in client.trials]
        state = client._loop = {"data": data, "sizes": sizes, "rng": np.random.default_rng(config.seed),
                                "previous": None}
    started = time.perf_counter()
    n_heads = len(client.heads)
    client.multipliers = (update_multipliers(state["previous"], n_heads) if config.balancing
                          else [1.0] * (n_heads + 1))
    record = LossRecord(epoch)
    for idx in batch_indices(len(state["data"]), state["sizes"], config, state["rng"]):
        l0, head_values = client.training_step(state["data"].take(idx))
        record.add(l0, head_values)
    mean0 = float(np.mean(record.final))
    server_mean = client.end_epoch(epoch)
    if server_mean != mean0:
        raise ProtocolError(f"epoch {epoch}: server mean L0 {server_mean} != client {mean0}")
    if mean0 < client.best_loss:
        client.best_state, client.best_loss, client.best_epoch = client.head_state(), mean0, epoch
    state["previous"] = record
    return [EpochLog(epoch, mean0, [float(np.mean(v)) for v in record.heads], list(client.multipliers),
                     time.perf_counter() - started)]
