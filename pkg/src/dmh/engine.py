"""Single-process DMH training and evaluation, plus the centralised baselines."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .data import Trial
from .errors import NonFiniteError
from .features import (GroupSpec, Normalizer, WindowBatch, correlations, group_features,
                       window_arrays, DEFAULT_THRESHOLDS)
from .networks import (HeadNetwork, Module, PredictionNetwork, build_head,
                       build_prediction_network, count_parameters)

log = logging.getLogger(__name__)

MULTIPLIER_BOUNDS = (0.1, 10.0)
FS_S_THRESHOLD = 0.2
PREDICTOR_SEED_SLOT = 1000


def child_seed(seed: int, k: int) -> int:
    """Deterministic, well-separated seed for sub-component ``k``."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def make_heads(mode: str, head_kind: str, spec: GroupSpec, window: int, seed: int,
               activation: str = "sigmoid") -> list[HeadNetwork]:
    return [build_head(head_kind, n_h, window, mode, child_seed(seed, h), activation, gid)
            for h, (n_h, gid) in enumerate(zip(spec.n_h, spec.group_ids))]


def make_predictor(width: int, seed: int, activation: str = "sigmoid") -> PredictionNetwork:
    return build_prediction_network(width, child_seed(seed, PREDICTOR_SEED_SLOT), activation)


class DmhModel(Module):
    """H head networks feeding one prediction network.

    ``mode="T"``: heads forecast their group's features, the prediction
    network sees all M forecasts. ``mode="E"``: heads forecast power, the
    prediction network sees H preliminary values.
    """

    system = "DMH"

    def __init__(self, mode: str, head_kind: str, spec: GroupSpec, window: int, horizon: int = 1,
                 seed: int = 0, activation: str = "sigmoid", normalizer: Normalizer | None = None):
        mode = mode.upper()
        if mode not in ("T", "E"):
            raise ValueError(f"unknown DMH mode {mode!r}")
        self.mode, self.head_kind, self.spec = mode, head_kind.upper(), spec
        self.window, self.horizon, self.seed, self.activation = window, horizon, seed, activation
        self.normalizer = normalizer
        self.heads = make_heads(mode, self.head_kind, spec, window, seed, activation)
        self.predictor = make_predictor(self.activation_width, seed, activation)
        self.multipliers = [1.0] * (len(self.heads) + 1)

    @property
    def system_name(self) -> str:
        return f"DMH-{self.mode}"

    @property
    def groups(self) -> list[list[int]]:
        return self.spec.groups

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def activation_width(self) -> int:
        """Floats the heads hand to the prediction network per sample (M or H)."""
        return sum(h.out_dim for h in self.heads)

    def head_params(self) -> list[Tensor]:
        return [p for h in self.heads for p in h.params()]

    def params(self) -> list[Tensor]:
        return self.head_params() + self.predictor.params()

    def head_targets(self, batch: WindowBatch) -> list[np.ndarray]:
        if self.mode == "T":
            return batch.feature_targets
        col = batch.power.reshape(-1, 1)
        return [col] * self.n_heads

    def run_heads(self, batch: WindowBatch) -> list[Tensor]:
        return [head(x) for head, x in zip(self.heads, batch.inputs)]

    def loss_terms(self, batch: WindowBatch):
        """(L_0, [L_1..L_H], P') for one batch, recorded on the active tape."""
        outs = self.run_heads(batch)
        head_losses = [ad.l1_loss(o, t) for o, t in zip(outs, self.head_targets(batch))]
        pred = self.predictor(ad.concat(outs, axis=1))
        return ad.l1_loss(pred, batch.power), head_losses, pred

    def predict(self, batch: WindowBatch) -> np.ndarray:
        return forward_dmh(self, batch)[1].data


class BaselineModel(Module):
    """One centralised network over a fixed feature subset (BS, FS-A, FS-S)."""

    def __init__(self, system: str, net_kind: str, columns: Sequence[int], window: int, horizon: int = 1,
                 seed: int = 0, activation: str = "sigmoid", normalizer: Normalizer | None = None,
                 feature_names: Sequence[str] = ()):
        self.system, self.columns = system, list(columns)
        self.head_kind = net_kind.upper()
        self.window, self.horizon, self.seed, self.activation = window, horizon, seed, activation
        self.normalizer = normalizer
        self.feature_names = list(feature_names)
        self.net = HeadNetwork(self.head_kind, len(self.columns), window, 1, child_seed(seed, 0), activation)
        self.multipliers = [1.0]
        self.heads: list[HeadNetwork] = []

    @property
    def system_name(self) -> str:
        return self.system

    @property
    def groups(self) -> list[list[int]]:
        return [self.columns]

    @property
    def n_heads(self) -> int:
        return 0

    def params(self) -> list[Tensor]:
        return self.net.params()

    def loss_terms(self, batch: WindowBatch):
        pred = ad.reshape(self.net(batch.inputs[0]), (len(batch),))
        return ad.l1_loss(pred, batch.power), [], pred

    def predict(self, batch: WindowBatch) -> np.ndarray:
        return self.net(batch.inputs[0]).data.reshape(-1)


def forward_dmh(model: DmhModel, batch: WindowBatch) -> tuple[list[Tensor], Tensor]:
    """Head outputs and the final (normalised) power prediction."""
    outs = model.run_heads(batch)
    return outs, model.predictor(ad.concat(outs, axis=1))


def compose_total_loss(head_losses: Sequence[Tensor], final_loss: Tensor, multipliers: Sequence[float]) -> Tensor:
    """``M_0 * L_0 + sum_h M_h * L_h``."""
    if len(multipliers) != len(head_losses) + 1:
        raise ValueError(f"{len(multipliers)} multipliers for {len(head_losses)} head losses")
    return ad.weighted_sum([final_loss, *head_losses], multipliers)


@dataclass
class LossRecord:
    """Per-batch losses of one epoch: ``final[b]`` and ``heads[h][b]``."""

    epoch: int
    final: list[float] = field(default_factory=list)
    heads: list[list[float]] = field(default_factory=list)

    def add(self, l0: float, head_values: Sequence[float]) -> None:
        if not self.heads:
            self.heads = [[] for _ in head_values]
        self.final.append(l0)
        for h, v in enumerate(head_values):
            self.heads[h].append(v)


def update_multipliers(record: LossRecord | None, n_heads: int,
                       bounds: tuple[float, float] = MULTIPLIER_BOUNDS) -> list[float]:
    """``[1, clamp(std(L_h) / std(L_0))...]`` from the previous epoch's batches."""
    if record is None:
        return [1.0] * (n_heads + 1)
    if len(record.final) < 2:
        log.warning("epoch %d has fewer than two batches; std undefined, multipliers reset to 1", record.epoch)
        return [1.0] * (n_heads + 1)
    s0 = float(np.std(record.final))
    if s0 == 0.0:
        log.warning("std of final loss is zero in epoch %d; multipliers set to 1", record.epoch)
        return [1.0] * (n_heads + 1)
    lo, hi = bounds
    return [1.0] + [float(np.clip(np.std(record.heads[h]) / s0, lo, hi)) for h in range(n_heads)]


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int | None = 64     # None: one batch per trial
    lr: float = 0.1
    seed: int = 0
    balancing: bool = True
    shuffle: bool = True


@dataclass
class EpochLog:
    epoch: int
    final_mean: float
    head_means: list[float]
    multipliers: list[float]
    wall_time: float
    aborted: bool = False


@dataclass
class Checkpoint:
    """Snapshot of a trained model plus what is needed to rebuild it."""

    model: Module
    state: list[np.ndarray]
    epoch: int
    monitored_loss: float
    multipliers: list[float]

    def restore(self) -> Module:
        self.model.load_state(self.state)
        self.model.multipliers = list(self.multipliers)
        return self.model


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLog]
    final_state: list[np.ndarray]


def build_windows(model, trials: Sequence[Trial]) -> WindowBatch:
    """Normalised windows of every trial, concatenated in trial order."""
    norm = model.normalizer
    parts = [window_arrays(norm.apply_features(t.features), norm.apply_target(t.power), model.groups,
                           model.window, model.horizon) for t in trials]
    return WindowBatch.concatenate(parts)


def batch_indices(n_samples: int, trial_sizes: Sequence[int], config: TrainConfig,
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Batch index lists for one epoch (seeded shuffle, then contiguous chunks)."""
    if config.batch_size is None:
        bounds = np.cumsum([0, *trial_sizes])
        chunks = [np.arange(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        order = rng.permutation(len(chunks)) if config.shuffle else range(len(chunks))
        return [chunks[i] for i in order]
    order = rng.permutation(n_samples) if config.shuffle else np.arange(n_samples)
    return [order[i:i + config.batch_size] for i in range(0, n_samples, config.batch_size)]


def train(model, trials: Sequence[Trial], config: TrainConfig = TrainConfig(),
          on_epoch=None) -> TrainResult:
    """Mini-batch Adam on ``M_0*L_0 + sum M_h*L_h`` with save-best on mean L_0."""
    if model.normalizer is None:
        model.normalizer = Normalizer.fit(trials)
    data = build_windows(model, trials)
    sizes = [len(t) - model.window - model.horizon + 1 for t in trials]
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params(), lr=config.lr)
    n_heads = model.n_heads
    model.multipliers = [1.0] * (n_heads + 1)
    best: Checkpoint | None = None
    history: list[EpochLog] = []
    previous: LossRecord | None = None

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        multipliers = update_multipliers(previous, n_heads) if config.balancing else [1.0] * (n_heads + 1)
        model.multipliers = multipliers
        record = LossRecord(epoch)
        aborted = False
        for idx in batch_indices(len(data), sizes, config, rng):
            batch = data.take(idx)
            with Tape() as tape:
                l0, head_losses, _ = model.loss_terms(batch)
                total = compose_total_loss(head_losses, l0, multipliers)
            if not np.isfinite(total.item()):
                aborted = True
                break
            tape.backward(total)
            try:
                opt.step()
            except NonFiniteError as exc:
                log.warning("epoch %d: %s", epoch, exc)
                aborted = True
                break
            record.add(l0.item(), [h.item() for h in head_losses])

        if aborted:
            log.warning("epoch %d aborted on non-finite loss; restoring last checkpoint", epoch)
            if best is not None:
                best.restore()
            history.append(EpochLog(epoch, float("nan"), [], multipliers, time.perf_counter() - started, True))
            previous = None
            continue

        mean0 = float(np.mean(record.final))
        head_means = [float(np.mean(v)) for v in record.heads]
        history.append(EpochLog(epoch, mean0, head_means, multipliers, time.perf_counter() - started))
        if best is None or mean0 < best.monitored_loss:
            best = Checkpoint(model, model.state(), epoch, mean0, list(multipliers))
        previous = record
        if on_epoch is not None:
            on_epoch(history[-1])

    if best is None:
        raise NonFiniteError("every epoch aborted; no checkpoint available")
    return TrainResult(best, history, model.state())


class Metrics(NamedTuple):
    mae: float
    mse: float


def predict_trials(model, trials: Sequence[Trial]) -> tuple[np.ndarray, np.ndarray]:
    """Denormalised predictions and the matching raw power targets."""
    norm = model.normalizer
    preds, targets = [], []
    for t in trials:
        batch = window_arrays(norm.apply_features(t.features), norm.apply_target(t.power), model.groups,
                              model.window, model.horizon)
        preds.append(norm.invert_target(model.predict(batch)))
        targets.append(t.power[batch.target_index])
    return np.concatenate(preds), np.concatenate(targets)


def metrics(pred: np.ndarray, target: np.ndarray) -> Metrics:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return Metrics(float(np.mean(np.abs(err))), float(np.mean(err * err)))


def evaluate(checkpoint: "Checkpoint | Module", trials: Sequence[Trial], horizon: int | None = None) -> Metrics:
    """MAE and MSE in original power units over all windows of ``trials``."""
    if not trials:
        raise ValueError("empty test set")
    model = checkpoint.restore() if isinstance(checkpoint, Checkpoint) else checkpoint
    if horizon is not None and horizon != model.horizon:
        raise ValueError(f"model was trained for horizon {model.horizon}, asked for {horizon}")
    return metrics(*predict_trials(model, trials))


def build_dmh(mode: str, head_kind: str, train_trials: Sequence[Trial], window: int = 5, horizon: int = 1,
              thresholds=DEFAULT_THRESHOLDS, seed: int = 0, activation: str = "sigmoid",
              signed: bool = False) -> DmhModel:
    """Fit grouping and scaling on the training trials and build an untrained model."""
    coeffs, _ = correlations(train_trials)
    spec = group_features(coeffs, thresholds, signed=signed, feature_names=train_trials[0].feature_names)
    return DmhModel(mode, head_kind, spec, window, horizon, seed, activation, Normalizer.fit(train_trials))


def build_baseline(kind: str, net_kind: str, train_trials: Sequence[Trial], window: int = 5, horizon: int = 1,
                   seed: int = 0, activation: str = "sigmoid") -> BaselineModel:
    kind = kind.upper()
    n_features = train_trials[0].n_features
    if kind == "BS":
        columns = list(range(n_features))
    elif kind == "FS-A":
        columns, net_kind = list(range(n_features)), "LSTM"
    elif kind == "FS-S":
        coeffs, _ = correlations(train_trials)
        columns = [m for m, c in enumerate(coeffs) if np.isfinite(c) and abs(c) >= FS_S_THRESHOLD]
        net_kind = "LSTM"
        if not columns:
            raise ValueError(f"FS-S: no feature reaches |C| >= {FS_S_THRESHOLD}")
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    names = train_trials[0].feature_names
    return BaselineModel(kind, net_kind, columns, window, horizon, seed, activation,
                         Normalizer.fit(train_trials), [names[c] for c in columns])


def run_baseline(kind: str, net_kind: str, train_trials: Sequence[Trial], test_trials: Sequence[Trial],
                 config: TrainConfig = TrainConfig(), window: int = 5, horizon: int = 1) -> Metrics:
    model = build_baseline(kind, net_kind, train_trials, window, horizon, config.seed)
    result = train(model, train_trials, config)
    return evaluate(result.checkpoint, test_trials)


def parameter_count(model) -> int:
    return count_parameters(model)
