"""Correlation-based feature grouping, min-max scaling and rolling windows."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Trial
from .errors import DegenerateSeries, EmptyTrial

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.0, 0.05, 0.20, 1.0)


def pearson_correlation(feature, power) -> float:
    """Pearson coefficient with population moments."""
    f = np.asarray(feature, dtype=np.float64)
    p = np.asarray(power, dtype=np.float64)
    if f.shape != p.shape or f.ndim != 1:
        raise ValueError(f"series shapes differ: {f.shape} vs {p.shape}")
    if f.size < 2:
        raise ValueError("need at least two observations")
    df = f - f.mean()
    dp = p - p.mean()
    sf = np.sqrt(np.mean(df * df))
    sp = np.sqrt(np.mean(dp * dp))
    if sf == 0.0 or sp == 0.0:
        raise DegenerateSeries("zero variance series")
    c = np.mean(df * dp) / (sf * sp)
    return float(np.clip(c, -1.0, 1.0))


def correlations(trials: Sequence[Trial]) -> tuple[np.ndarray, list[int]]:
    """Per-feature coefficients on the concatenated trials.

    Degenerate (constant) features get NaN and are listed separately.
    """
    feats = np.vstack([t.features for t in trials])
    power = np.concatenate([t.power for t in trials])
    coeffs = np.empty(feats.shape[1])
    degenerate = []
    for m in range(feats.shape[1]):
        try:
            coeffs[m] = pearson_correlation(feats[:, m], power)
        except DegenerateSeries:
            coeffs[m] = np.nan
            degenerate.append(m)
    return coeffs, degenerate


def _check_thresholds(thresholds: Sequence[float]) -> tuple[float, ...]:
    t = tuple(float(x) for x in thresholds)
    if len(t) < 2 or t[0] != 0.0 or t[-1] != 1.0:
        raise ValueError(f"thresholds must start at 0 and end at 1, got {t}")
    if any(b <= a for a, b in zip(t, t[1:])):
        raise ValueError(f"thresholds must be strictly increasing, got {t}")
    return t


@dataclass
class GroupSpec:
    """Partition of feature indices into correlation bands.

    ``groups`` holds only non-empty groups; ``group_ids`` gives the 1-based
    band each one came from, so a dropped empty band stays visible.
    """

    thresholds: tuple[float, ...]
    groups: list[list[int]]
    group_ids: list[int]
    coefficients: list[float] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)
    signed: bool = False
    degenerate: list[int] = field(default_factory=list)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_h(self) -> list[int]:
        return [len(g) for g in self.groups]

    @property
    def n_features(self) -> int:
        return sum(self.n_h)

    def assignment(self) -> np.ndarray:
        """1-based band of every feature index."""
        out = np.zeros(self.n_features, dtype=int)
        for gid, members in zip(self.group_ids, self.groups):
            out[members] = gid
        return out

    def to_dict(self) -> dict:
        names = self.feature_names or [f"f{i}" for i in range(self.n_features)]
        assign = self.assignment()
        return {
            "thresholds": list(self.thresholds),
            "signed": self.signed,
            "features": [
                {
                    "name": names[m],
                    "group": int(assign[m]),
                    "coefficient": None if m in self.degenerate else self.coefficients[m],
                }
                for m in range(self.n_features)
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, raw: dict) -> "GroupSpec":
        feats = raw["features"]
        thresholds = _check_thresholds(raw["thresholds"])
        by_group: dict[int, list[int]] = {}
        for m, entry in enumerate(feats):
            by_group.setdefault(int(entry["group"]), []).append(m)
        ids = sorted(by_group)
        return cls(
            thresholds=thresholds,
            groups=[by_group[g] for g in ids],
            group_ids=ids,
            coefficients=[float("nan") if e["coefficient"] is None else e["coefficient"] for e in feats],
            feature_names=[e["name"] for e in feats],
            signed=bool(raw.get("signed", False)),
            degenerate=[m for m, e in enumerate(feats) if e["coefficient"] is None],
        )

    @classmethod
    def load(cls, path: str | Path) -> "GroupSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def band_of(value: float, thresholds: Sequence[float]) -> int:
    """1-based half-open band ``[T_{h-1}, T_h)``; the top value 1 closes into the last band."""
    n = len(thresholds) - 1
    for h in range(1, n + 1):
        if thresholds[h - 1] <= value < thresholds[h]:
            return h
    return n if value >= thresholds[-1] else 1


def group_features(coefficients: Sequence[float], thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                   signed: bool = False, feature_names: Sequence[str] | None = None) -> GroupSpec:
    """Assign each feature to a correlation band.

    By default the magnitude ``|C|`` is banded. With ``signed=True`` the raw
    coefficient is used and negative values fall into the first band.
    NaN (degenerate) coefficients go to the first band as well.
    """
    t = _check_thresholds(thresholds)
    coeffs = [float(c) for c in coefficients]
    degenerate = [m for m, c in enumerate(coeffs) if np.isnan(c)]
    members: dict[int, list[int]] = {h: [] for h in range(1, len(t))}
    for m, c in enumerate(coeffs):
        value = 0.0 if np.isnan(c) else (c if signed else abs(c))
        members[band_of(value, t)].append(m)
    empty = [h for h, idx in members.items() if not idx]
    if empty:
        log.warning("dropping empty feature group(s) %s; %d head(s) remain", empty, len(t) - 1 - len(empty))
    ids = [h for h, idx in members.items() if idx]
    return GroupSpec(t, [members[h] for h in ids], ids, coeffs,
                     list(feature_names) if feature_names is not None else [], signed, degenerate)


@dataclass
class Normalizer:
    """Per-column min-max scaling to [0, 1]; constant columns map to 0.5."""

    feature_min: np.ndarray
    feature_max: np.ndarray
    target_min: float
    target_max: float

    @classmethod
    def fit(cls, trials: Sequence[Trial]) -> "Normalizer":
        if not trials:
            raise ValueError("cannot fit a normalizer on zero trials")
        feats = np.vstack([t.features for t in trials])
        power = np.concatenate([t.power for t in trials])
        return cls(feats.min(axis=0), feats.max(axis=0), float(power.min()), float(power.max()))

    @staticmethod
    def _scale(x, lo, hi):
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - lo) / safe, 0.5)

    @staticmethod
    def _unscale(y, lo, hi):
        span = hi - lo
        return np.where(span > 0, y * span + lo, lo)

    def apply_features(self, x: np.ndarray) -> np.ndarray:
        return self._scale(np.asarray(x, dtype=np.float64), self.feature_min, self.feature_max)

    def invert_features(self, y: np.ndarray) -> np.ndarray:
        return self._unscale(np.asarray(y, dtype=np.float64), self.feature_min, self.feature_max)

    def apply_target(self, p):
        return self._scale(np.asarray(p, dtype=np.float64), self.target_min, self.target_max)

    def invert_target(self, y):
        return self._unscale(np.asarray(y, dtype=np.float64), self.target_min, self.target_max)

    def apply(self, trial: Trial) -> Trial:
        return Trial(self.apply_features(trial.features), self.apply_target(trial.power),
                     trial.feature_names, trial.name)

    def to_dict(self) -> dict:
        return {
            "feature_min": self.feature_min.tolist(),
            "feature_max": self.feature_max.tolist(),
            "target_min": self.target_min,
            "target_max": self.target_max,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Normalizer":
        return cls(np.array(raw["feature_min"], dtype=np.float64), np.array(raw["feature_max"], dtype=np.float64),
                   float(raw["target_min"]), float(raw["target_max"]))


@dataclass
class WindowedSample:
    """Inputs and targets for one prediction time ``target_index``."""

    inputs: list[np.ndarray]          # per group, (n_h, W), oldest step first
    feature_targets: list[np.ndarray]  # per group, (n_h,)
    power_target: float
    target_index: int
    horizon: int


@dataclass
class WindowBatch:
    """Stacked windows: the array form of many :class:`WindowedSample`."""

    inputs: list[np.ndarray]          # per group, (S, n_h, W)
    feature_targets: list[np.ndarray]  # per group, (S, n_h)
    power: np.ndarray                  # (S,)
    target_index: np.ndarray           # (S,)

    def __len__(self) -> int:
        return self.power.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch([x[idx] for x in self.inputs], [y[idx] for y in self.feature_targets],
                           self.power[idx], self.target_index[idx])

    @staticmethod
    def concatenate(batches: Sequence["WindowBatch"]) -> "WindowBatch":
        n = len(batches[0].inputs)
        return WindowBatch(
            [np.concatenate([b.inputs[h] for b in batches]) for h in range(n)],
            [np.concatenate([b.feature_targets[h] for b in batches]) for h in range(n)],
            np.concatenate([b.power for b in batches]),
            np.concatenate([b.target_index for b in batches]),
        )


def window_arrays(features: np.ndarray, power: np.ndarray, groups: Sequence[Sequence[int]],
                  window: int, horizon: int = 1) -> WindowBatch:
    """Vectorised rolling windows.

    The sample for target time ``t`` reads inputs at ``t-horizon-window+1 ..
    t-horizon`` and targets the features and power at ``t``.
    """
    n = features.shape[0]
    if window < 1 or horizon < 1:
        raise ValueError("window and horizon must be >= 1")
    if n < window + horizon:
        raise EmptyTrial(f"trial length {n} < window {window} + horizon {horizon}")
    count = n - window - horizon + 1
    targets = np.arange(window + horizon - 1, n)
    # windows[s] covers times s .. s+window-1, shape (S, M, W)
    windows = sliding_window_view(features, window, axis=0)[:count]
    inputs = [np.ascontiguousarray(windows[:, list(g), :]) for g in groups]
    feature_targets = [np.ascontiguousarray(features[targets][:, list(g)]) for g in groups]
    return WindowBatch(inputs, feature_targets, np.array(power[targets]), targets)


def pack_windows(trial: Trial, spec: GroupSpec, window: int, horizon: int = 1) -> list[WindowedSample]:
    batch = window_arrays(trial.features, trial.power, spec.groups, window, horizon)
    return [
        WindowedSample([x[s] for x in batch.inputs], [y[s] for y in batch.feature_targets],
                       float(batch.power[s]), int(batch.target_index[s]), horizon)
        for s in range(len(batch))
    ]
