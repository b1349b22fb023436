"""Command line: ``dmh analyze | train | eval | simulate | report``.

Experiments are described by a flat ``key = value`` file (``#`` comments);
command-line flags override file values. Keys::

    dataset      name used in reports (default: schema name or "synthetic")
    schema       path to a DatasetSchema JSON file
    synthetic    true to use the built-in generator instead of a schema
    n_trials, length, n_informative, n_noise, noise_level   generator settings
    n_train, n_test, split_seed                             trial split
    mode         T | E | BS | FS-A | FS-S
    head         MLP | CNN | LSTM
    thresholds   comma list, e.g. 0,0.05,0.2,1
    signed       true to group by signed correlation
    window, horizon, epochs, batch_size, lr, seed
    balancing    true | false
    activation   sigmoid | leaky_relu[:slope]
    transport    sim | stream
    clients      number of simulated clients (simulate only)
    output       run directory

Without ``output`` runs go under ``$DMH_OUTPUT_ROOT`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path


from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSchema, SyntheticSpec, Trial, generate_synthetic, load_trials, split_dataset
from .engine import (DmhModel, TrainConfig, build_baseline, build_dmh, evaluate, train)
from .features import correlations, group_features
from .networks import count_parameters
from .report import params_table, read_metrics, results_table, run_log_text, write_metrics
from .split import run_split_training, transmission_ratio

log = logging.getLogger("dmh")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ENV = "DMH_OUTPUT_ROOT"


class ConfigError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    dataset: str = ""
    schema: str = ""
    synthetic: bool = False
    n_trials: int = 6
    length: int = 500
    n_informative: int = 6
    n_noise: int = 10
    noise_level: float = 0.1
    n_train: int = 4
    n_test: int = 2
    split_seed: int = 0
    mode: str = "T"
    head: str = "MLP"
    thresholds: tuple = (0.0, 0.05, 0.2, 1.0)
    signed: bool = False
    window: int = 5
    horizon: int = 1
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 0.1
    seed: int = 0
    balancing: bool = True
    activation: str = "sigmoid"
    transport: str = "sim"
    clients: int = 1
    output: str = ""

    def validate(self) -> "ExperimentConfig":
        self.mode = self.mode.upper()
        self.head = self.head.upper()
        if self.mode not in ("T", "E", "BS", "FS-A", "FS-S"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.head not in ("MLP", "CNN", "LSTM"):
            raise ConfigError(f"unknown head {self.head!r}")
        t = self.thresholds
        if len(t) < 2 or t[0] != 0.0 or t[-1] != 1.0 or any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError(f"thresholds must rise strictly from 0 to 1, got {t}")
        if self.window < 1 or self.horizon < 1 or self.epochs < 1 or self.batch_size < 0:
            raise ConfigError("window, horizon and epochs must be >= 1")
        if self.transport not in ("sim", "stream"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if not self.synthetic and not self.schema:
            raise ConfigError("set either schema = <path> or synthetic = true")
        if not self.dataset:
            self.dataset = "synthetic" if self.synthetic else Path(self.schema).stem
        return self

    @property
    def system(self) -> str:
        return f"DMH-{self.mode}" if self.mode in ("T", "E") else self.mode

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size or None, lr=self.lr,
                           seed=self.seed, balancing=self.balancing)

    def run_dir(self) -> Path:
        if self.output:
            return Path(self.output)
        root = Path(os.environ.get(OUTPUT_ENV, "runs"))
        return root / f"{self.dataset}-{self.system}-{self.head}-d{self.horizon}-s{self.seed}"


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key {name!r}")
    kind = kinds[name]
    try:
        if kind == "bool":
            return _bool(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(float(x) for x in str(raw).split(","))
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return str(raw).strip()


def read_config(path: str | Path | None, overrides: dict) -> ExperimentConfig:
    values = {}
    if path:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            parser.read_string("[experiment]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        base = Path(path).parent
        for key, raw in parser["experiment"].items():
            values[key] = _coerce(key, raw)
        if values.get("schema") and not Path(values["schema"]).is_absolute():
            values["schema"] = str(base / values["schema"])
    for key, raw in overrides.items():
        if raw is not None:
            values[key] = raw if not isinstance(raw, str) else _coerce(key, raw)
    try:
        return ExperimentConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_data(cfg: ExperimentConfig) -> tuple[list[Trial], list[Trial]]:
    if cfg.synthetic:
        trials = generate_synthetic(SyntheticSpec(cfg.n_trials, cfg.length, cfg.n_informative, cfg.n_noise,
                                                  cfg.noise_level, cfg.split_seed))
        n_train, n_test = cfg.n_train, cfg.n_test
    else:
        try:
            schema = DatasetSchema.load(cfg.schema)
        except (OSError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad schema {cfg.schema}: {exc}") from None
        trials = load_trials(schema)
        n_train, n_test = schema.n_train, schema.n_test
    return split_dataset(trials, n_train, n_test, cfg.split_seed)


def build_model(cfg: ExperimentConfig, train_trials):
    if cfg.mode in ("T", "E"):
        return build_dmh(cfg.mode, cfg.head, train_trials, cfg.window, cfg.horizon, cfg.thresholds,
                         cfg.seed, cfg.activation, cfg.signed)
    return build_baseline(cfg.mode, cfg.head, train_trials, cfg.window, cfg.horizon, cfg.seed, cfg.activation)


# --- commands ---------------------------------------------------------------------

def cmd_analyze(cfg: ExperimentConfig, out=None) -> Path:
    out = out or sys.stdout
    train_trials, _ = load_data(cfg)
    coeffs, degenerate = correlations(train_trials)
    names = train_trials[0].feature_names
    spec = group_features(coeffs, cfg.thresholds, signed=cfg.signed, feature_names=names)
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    spec.save(run / "groups.json")
    assign = spec.assignment()
    lines = ["feature\tcoefficient\tgroup"]
    for m, name in enumerate(names):
        c = "degenerate" if m in degenerate else f"{coeffs[m]:.6f}"
        lines.append(f"{name}\t{c}\tFG{assign[m]}")
    (run / "correlations.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines), file=out)
    for gid, n in zip(spec.group_ids, spec.n_h):
        print(f"FG{gid}: n_h = {n}", file=out)
    print(f"groups = {spec.n_groups}, total features = {spec.n_features}", file=out)
    if degenerate:
        print(f"degenerate (constant) features: {', '.join(names[m] for m in degenerate)}", file=out)
    return run


def cmd_train(cfg: ExperimentConfig, out=None) -> Path:
    out = out or sys.stdout
    train_trials, _ = load_data(cfg)
    model = build_model(cfg, train_trials)
    result = train(model, train_trials, cfg.train_config())
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, run / "checkpoint.bin")
    (run / "run_log.tsv").write_text(run_log_text(result.history, model.n_heads))
    if isinstance(model, DmhModel):
        model.spec.save(run / "groups.json")
    print(f"{cfg.system}: best epoch {result.checkpoint.epoch}, train L0 {result.checkpoint.monitored_loss:.6f}, "
          f"params {count_parameters(model)} -> {run}", file=out)
    return run


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | None = None, out=None) -> Path:
    out = out or sys.stdout
    run = cfg.run_dir()
    path = Path(checkpoint) if checkpoint else run / "checkpoint.bin"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run `dmh train` first")
    ckpt = load_checkpoint(path)
    if ckpt.model.system_name != cfg.system:
        raise ConfigError(f"checkpoint holds {ckpt.model.system_name}, config asks for {cfg.system}")
    _, test_trials = load_data(cfg)
    result = evaluate(ckpt, test_trials, cfg.horizon)
    run.mkdir(parents=True, exist_ok=True)
    write_metrics(run / "metrics.json", cfg.system, cfg.dataset, result, count_parameters(ckpt.model),
                  cfg.horizon, cfg.head)
    print(f"{cfg.system} {cfg.dataset}: MAE {result.mae:.6f} MSE {result.mse:.6f}", file=out)
    return run


def cmd_simulate(cfg: ExperimentConfig, out=None) -> Path:
    out = out or sys.stdout
    if cfg.mode not in ("T", "E"):
        raise ConfigError("simulate needs mode T or E")
    train_trials, test_trials = load_data(cfg)
    # one client per slice of the training trials
    k = max(1, min(cfg.clients, len(train_trials)))
    shards = [train_trials[i::k] for i in range(k)]
    split = run_split_training(shards, cfg.mode, cfg.head, cfg.train_config(),
                               "stream" if cfg.transport == "stream" else "inprocess",
                               cfg.window, cfg.horizon, cfg.thresholds, cfg.activation)
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    lines = ["client\tfloats_per_sample\tM\tW\tratio\tbytes_up\tbytes_down"]
    for c in split.clients:
        spec = c.client.spec
        ratio = transmission_ratio(c.ledger, spec.n_features, cfg.window, cfg.mode, spec.n_groups)
        s = c.ledger.summary()
        lines.append(f"{c.client.client_id}\t{c.ledger.forward_floats_per_sample():g}\t{spec.n_features}\t"
                     f"{cfg.window}\t{ratio:.6f}\t{s['bytes_up']}\t{s['bytes_down']}")
        c.ledger.dump(run / f"ledger_client{c.client.client_id}.tsv")
        ckpt = c.checkpoint()
        save_checkpoint(ckpt, run / f"checkpoint_client{c.client.client_id}.bin")
        (run / f"run_log_client{c.client.client_id}.tsv").write_text(run_log_text(c.history, spec.n_groups))
    (run / "transmission.tsv").write_text("\n".join(lines) + "\n")
    first = split.clients[0]
    ratio = transmission_ratio(first.ledger, first.client.spec.n_features, cfg.window)
    print(f"{ratio:.6f}", file=out)
    if test_trials:
        result = evaluate(first.checkpoint(), test_trials)
        write_metrics(run / "metrics.json", cfg.system, cfg.dataset, result,
                      count_parameters(first.checkpoint().model), cfg.horizon, cfg.head)
    return run


def cmd_report(run_dirs, out=None, output: str | None = None) -> str:
    out = out or sys.stdout
    rows = []
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise FileNotFoundError(f"missing {path}; run `dmh eval` first")
        rows.append(read_metrics(path))
    table = results_table(rows)
    params = params_table(rows)
    print(table, end="", file=out)
    print("\nparameters", file=out)
    print(params, end="", file=out)
    if output:
        Path(output).mkdir(parents=True, exist_ok=True)
        (Path(output) / "report.csv").write_text(table)
        (Path(output) / "params.csv").write_text(params)
    return table


# --- entry point ------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmh", description="Distributed multi-head power prediction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode")
        sp.add_argument("--head")
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--no-balancing", dest="balancing", action="store_false", default=None)
        sp.add_argument("--transport", choices=("sim", "stream"))
        sp.add_argument("--output")
        sp.add_argument("--seeds", help="comma list of seeds; each run goes to <output>/seed-<n>")
        sp.add_argument("--jobs", type=int, default=1)

    for name in ("analyze", "train", "eval", "simulate"):
        sp = sub.add_parser(name)
        common(sp)
        if name == "eval":
            sp.add_argument("--checkpoint")
    rp = sub.add_parser("report")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--output")
    return p


COMMANDS = {"analyze": cmd_analyze, "train": cmd_train, "eval": cmd_eval, "simulate": cmd_simulate}


def _run_one(command: str, cfg: ExperimentConfig, checkpoint: str | None) -> str:
    if command == "eval":
        return str(cmd_eval(cfg, checkpoint))
    return str(COMMANDS[command](cfg))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.runs, output=args.output)
            return EXIT_OK
        overrides = {k: getattr(args, k) for k in ("seed", "mode", "head", "horizon", "epochs", "balancing",
                                                     "transport", "output")}
        cfg = read_config(args.config, overrides)
        checkpoint = getattr(args, "checkpoint", None)
        if not args.seeds:
            _run_one(args.command, cfg, checkpoint)
            return EXIT_OK
        base = cfg.run_dir()
        configs = [replace(cfg, seed=int(s), output=str(base / f"seed-{int(s)}")) for s in args.seeds.split(",")]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(_run_one, [args.command] * len(configs), configs, [checkpoint] * len(configs)))
        else:
            for c in configs:
                _run_one(args.command, c, checkpoint)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
