"""Trial containers, delimited-file loading, train/test splits and synthetic data."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Trial:
    """One run: feature matrix (N, M) plus the aligned power series (N,)."""

    features: np.ndarray
    power: np.ndarray
    feature_names: tuple[str, ...]
    name: str = ""
    dropped_rows: int = 0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        power = np.asarray(self.power, dtype=np.float64)
        if feats.ndim != 2 or power.ndim != 1 or feats.shape[0] != power.shape[0]:
            raise ValueError(f"trial {self.name!r}: features {feats.shape} vs power {power.shape}")
        if feats.shape[1] != len(self.feature_names):
            raise ValueError(f"trial {self.name!r}: {feats.shape[1]} columns, {len(self.feature_names)} names")
        feats.setflags(write=False)
        power.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.power.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def select(self, columns: Sequence[int]) -> "Trial":
        cols = list(columns)
        return Trial(self.features[:, cols], self.power, tuple(self.feature_names[c] for c in cols), self.name)


@dataclass
class DatasetSchema:
    """Column layout and train/test counts for one dataset.

    Stored as a JSON file; ``trials`` paths are relative to the schema file
    unless absolute.
    """

    name: str
    features: list[str]
    target: str
    trials: list[str] = field(default_factory=list)
    n_train: int = 0
    n_test: int = 0
    delimiter: str = ","
    note: str = ""

    def __post_init__(self):
        if self.target in self.features:
            raise ValueError(f"target column {self.target!r} is also listed as a feature")
        if self.trials and self.n_train + self.n_test > len(self.trials):
            raise ValueError(
                f"schema {self.name!r} asks for {self.n_train}+{self.n_test} trials but lists {len(self.trials)}"
            )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSchema":
        path = Path(path)
        raw = json.loads(path.read_text())
        schema = cls(**raw)
        schema._root = path.parent
        return schema

    def save(self, path: str | Path) -> None:
        keys = ("name", "features", "target", "trials", "n_train", "n_test", "delimiter", "note")
        Path(path).write_text(json.dumps({k: getattr(self, k) for k in keys}, indent=2) + "\n")

    def trial_paths(self, directory: str | Path | None = None) -> list[Path]:
        root = Path(directory) if directory is not None else getattr(self, "_root", Path("."))
        return [p if p.is_absolute() else root / p for p in map(Path, self.trials)]


def bundled_schema(name: str) -> DatasetSchema:
    """One of the shipped layouts: ``AIUT``, ``BMW``, ``Husky-A``, ``Husky-B``, ``Husky-C``.

    They carry column names and train/test counts only; point ``trials`` at
    your own files before loading.
    """
    from importlib.resources import files

    raw = json.loads(files("dmh.schemas").joinpath(name.lower().replace("-", "_") + ".json").read_text())
    return DatasetSchema(**raw)


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


def read_trial(path: str | Path, features: Sequence[str], target: str, delimiter: str = ",") -> Trial:
    """Read one delimited file with a header row; unparseable rows are dropped."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if target not in header:
            raise ValueError(f"{path}: missing target column {target!r}")
        missing = [f for f in features if f not in header]
        if missing:
            raise ValueError(f"{path}: missing feature columns {missing}")
        cols = [header.index(f) for f in features]
        tcol = header.index(target)
        rows, power, dropped = [], [], 0
        for line in reader:
            if not line or all(not cell.strip() for cell in line):
                continue
            try:
                row = [_parse_float(line[c]) for c in cols]
                target_value = _parse_float(line[tcol])
            except (ValueError, IndexError):
                dropped += 1
                continue
            rows.append(row)
            power.append(target_value)
    if not power:
        raise ValueError(f"{path}: no usable rows")
    if dropped:
        log.warning("%s: dropped %d unparseable row(s)", path.name, dropped)
    return Trial(np.array(rows).reshape(len(power), len(cols)), np.array(power), tuple(features),
                 path.stem, dropped)


def load_trials(schema: DatasetSchema, directory: str | Path | None = None) -> list[Trial]:
    return [read_trial(p, schema.features, schema.target, schema.delimiter)
            for p in schema.trial_paths(directory)]


def write_trial(trial: Trial, path: str | Path, target: str = "power", delimiter: str = ",") -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(list(trial.feature_names) + [target])
        for row, p in zip(trial.features, trial.power):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(p))])


def split_dataset(trials: Sequence[Trial], n_train: int, n_test: int, seed: int = 0):
    """Seeded disjoint partition into (train, test)."""
    if n_train < 0 or n_test < 0 or n_train + n_test > len(trials):
        raise ValueError(f"cannot take {n_train} train + {n_test} test from {len(trials)} trials")
    order = np.random.default_rng(seed).permutation(len(trials))
    train = [trials[i] for i in order[:n_train]]
    test = [trials[i] for i in order[n_train:n_train + n_test]]
    return train, test


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic generator.

    Rule ``"ar1-linear"``: every feature is an independent stationary AR(1)
    process ``x_t = phi * x_{t-1} + sqrt(1 - phi^2) * e_t`` (unit variance).
    Power is ``offset + coefficients @ informative_t + noise_level * e_t``.
    Noise features never enter the power equation.
    """

    n_trials: int = 6
    length: int = 500
    n_informative: int = 6
    n_noise: int = 10
    noise_level: float = 0.1
    seed: int = 0
    phi: float = 0.8
    offset: float = 10.0
    rule: str = "ar1-linear"

    def coefficients(self) -> np.ndarray:
        # fixed, seed-independent weights so the generating rule is documented
        k = np.arange(1, self.n_informative + 1)
        return 1.0 + 0.5 * (k % 3)


def _ar1(rng: np.random.Generator, n: int, cols: int, phi: float) -> np.ndarray:
    out = np.empty((n, cols))
    out[0] = rng.standard_normal(cols)
    scale = math.sqrt(1.0 - phi * phi)
    shocks = rng.standard_normal((n, cols))
    for t in range(1, n):
        out[t] = phi * out[t - 1] + scale * shocks[t]
    return out


def generate_synthetic(spec: SyntheticSpec) -> list[Trial]:
    if spec.rule != "ar1-linear":
        raise ValueError(f"unknown generative rule {spec.rule!r}")
    rng = np.random.default_rng(spec.seed)
    names = tuple([f"info_{i}" for i in range(spec.n_informative)]
                  + [f"noise_{i}" for i in range(spec.n_noise)])
    beta = spec.coefficients()
    trials = []
    for k in range(spec.n_trials):
        info = _ar1(rng, spec.length, spec.n_informative, spec.phi)
        noise = _ar1(rng, spec.length, spec.n_noise, spec.phi)
        power = spec.offset + info @ beta
        if spec.noise_level:
            power = power + spec.noise_level * rng.standard_normal(spec.length)
        trials.append(Trial(np.hstack([info, noise]), power, names, f"synthetic_{k:03d}"))
    return trials
