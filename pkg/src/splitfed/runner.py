"""Experiment orchestration: config, dataset wiring, metrics CSV, checkpoint.

A run executes one engine for `global_epochs` rounds and appends one
row per round to a CSV (comma separated, '.' decimal). All columns
except wall_time_sec are reproducible bit for bit for a fixed config
and seed on the in-process transport.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from .costs import CostInputs
from .data import Dataset, load_idx, synthetic
from .errors import ConfigError
from .models import build_architecture, default_cut, model_stats, save_checkpoint, split_at
from .privacy import DpConfig, format_budget
from .protocols import ALGOS, RunResult, TrainConfig, run_protocol
from .transport import TraceLog, TrafficCounter

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


@dataclass
class RunConfig:
    algo: str = "sflv1"
    clients: int = 5
    global_epochs: int = 200
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.004
    arch: str = "lenet_small"
    cut_index: int = -1  # -1: architecture default
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    subset_size: int = 0  # 0: all training samples
    test_subset_size: int = 0
    synth_dim: int = 16
    synth_classes: int = 4
    seed: int = 0
    init: str = "xavier"
    transport: str = "inproc"
    compute_delay_ms: float = 0.0
    out: str = "run_metrics.csv"
    trace: bool = False
    # differential privacy
    gradient_dp: bool = False
    smashed_dp: bool = False
    noise_scale: float = 1.3
    clip_norm: float = 1.0
    epsilon: float = 0.5
    delta: float = 1e-5
    smashed_epsilon: float = 1.0

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset must be mnist or synthetic, got {self.dataset!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"transport must be inproc or tcp, got {self.transport!r}")
        if self.arch not in ("lenet_small", "mlp2"):
            raise ConfigError(f"arch must be lenet_small or mlp2, got {self.arch!r}")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.global_epochs < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("epoch and batch settings must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if (self.gradient_dp or self.smashed_dp) and self.algo in ("central", "fl"):
            raise ConfigError("dp mechanisms apply to the split protocols (sl, sflv1, sflv2)")
        try:
            self.dp_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dp_config(self) -> DpConfig:
        return DpConfig(
            noise_scale=self.noise_scale,
            clip_norm=self.clip_norm,
            epsilon=self.epsilon,
            delta=self.delta,
            smashed_epsilon=self.smashed_epsilon,
            gradient_dp=self.gradient_dp,
            smashed_dp=self.smashed_dp,
        )

    def train_config(self) -> TrainConfig:
        dp = self.dp_config()
        return TrainConfig(
            learning_rate=self.lr,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            global_epochs=self.global_epochs,
            seed=self.seed,
            init_scheme=self.init,
            dp=dp if dp.enabled else None,
            compute_delay_s=self.compute_delay_ms / 1000.0,
        )

    def summary(self) -> str:
        parts = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        parts.append(f"epsilon_report={format_budget(self.dp_config())}")
        return " ".join(parts)


_BOOL_KEYS = {"gradient_dp", "smashed_dp", "trace"}


def parse_config_file(path: str) -> dict:
    """Line-oriented `key = value` pairs; '#' starts a comment."""
    values: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def config_from_values(values: dict) -> RunConfig:
    cfg = RunConfig()
    valid = {f.name: f.type for f in fields(RunConfig)}
    for key, value in values.items():
        if key not in valid:
            raise ConfigError(f"unknown config key: {key}")
        current = getattr(cfg, key)
        if key in _BOOL_KEYS:
            if isinstance(value, bool):
                parsed = value
            elif str(value).lower() in ("1", "true", "yes", "on"):
                parsed = True
            elif str(value).lower() in ("0", "false", "no", "off"):
                parsed = False
            else:
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        elif isinstance(current, int) and not isinstance(current, bool):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        else:
            parsed = str(value)
        setattr(cfg, key, parsed)
    cfg.validate()
    return cfg


def load_run_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "mnist":
        train = load_idx(
            os.path.join(cfg.data_dir, MNIST_FILES["train"][0]),
            os.path.join(cfg.data_dir, MNIST_FILES["train"][1]),
        )
        test = load_idx(
            os.path.join(cfg.data_dir, MNIST_FILES["test"][0]),
            os.path.join(cfg.data_dir, MNIST_FILES["test"][1]),
        )
    else:
        n = cfg.subset_size or 512
        n_test = cfg.test_subset_size or max(200, n // 4)
        train = synthetic(n, cfg.synth_dim, cfg.synth_classes, cfg.seed)
        test = synthetic(
            n_test, cfg.synth_dim, cfg.synth_classes, cfg.seed ^ 0x7E57, center_seed=cfg.seed
        )
    if cfg.subset_size and cfg.subset_size < len(train):
        train = train.take(np.arange(cfg.subset_size))
    if cfg.test_subset_size and cfg.test_subset_size < len(test):
        test = test.take(np.arange(cfg.test_subset_size))
    return train, test


def build_run_architecture(cfg: RunConfig, train: Dataset):
    classes = int(train.labels.max()) + 1
    if cfg.arch == "lenet_small":
        if train.images.ndim != 4:
            raise ConfigError("lenet_small needs image data")
        return build_architecture("lenet_small", (32, 32, 1), classes)
    if train.images.ndim == 4:
        dim = int(np.prod(train.images.shape[1:]))
    else:
        dim = train.images.shape[1]
    return build_architecture("mlp2", (dim,), classes)


CSV_FIXED_COLUMNS = ["global_epoch", "mean_train_acc", "mean_test_acc", "cv_train", "cv_test"]


def csv_header(clients: int) -> str:
    cols = list(CSV_FIXED_COLUMNS)
    for k in range(clients):
        cols += [f"bytes_up_c{k}", f"bytes_down_c{k}", f"elements_up_c{k}", f"elements_down_c{k}"]
    cols += ["wall_time_sec", "epsilon_report"]
    return ",".join(cols)


def write_metrics_csv(path: str, cfg: RunConfig, result: RunResult) -> None:
    budget = format_budget(cfg.dp_config())
    with open(path, "w") as fh:
        fh.write(f"# splitfed-metrics v1 {cfg.summary()}\n")
        fh.write(csv_header(cfg.clients) + "\n")
        for record in result.rounds:
            row = [
                str(record.round),
                repr(record.mean_train_acc),
                repr(record.mean_test_acc),
                repr(record.cv_train),
                repr(record.cv_test),
            ]
            for k in range(cfg.clients):
                up_b, down_b = result.counter.round_bytes(k, record.round)
                up_e, down_e = result.counter.round_elements(k, record.round)
                row += [str(up_b), str(down_b), str(up_e), str(down_e)]
            row.append(repr(record.wall_time))
            row.append(budget)
            fh.write(",".join(row) + "\n")


def checkpoint_path(out: str) -> str:
    base, _ = os.path.splitext(out)
    return base + ".ckpt"


def run(cfg: RunConfig) -> RunResult:
    """Execute the configured engine; writes the metrics CSV and the final
    full-network checkpoint next to it."""
    cfg.validate()
    train, test = load_run_datasets(cfg)
    if len(train) < cfg.clients:
        raise ConfigError(f"{len(train)} samples cannot cover {cfg.clients} clients")
    arch = build_run_architecture(cfg, train)
    cut = cfg.cut_index if cfg.cut_index >= 1 else default_cut(arch.name)
    trace = TraceLog() if cfg.trace else None
    result = run_protocol(
        cfg.algo,
        arch,
        cut,
        train,
        test,
        cfg.clients,
        cfg.train_config(),
        transport=cfg.transport,
        counter=TrafficCounter(),
        trace=trace,
    )
    if cfg.out:
        write_metrics_csv(cfg.out, cfg, result)
        save_checkpoint(checkpoint_path(cfg.out), result.final_params)
    return result


def cost_inputs_for_run(cfg: RunConfig, train: Dataset, arch, cut: int,
                        train_time: float = 1.0, wait_time: float = 0.0) -> CostInputs:
    model = split_at(arch, cut, cfg.seed, cfg.init)
    stats = model_stats(model)
    return CostInputs(
        clients=cfg.clients,
        data_size=len(train),
        smashed_size=stats.smashed_size,
        param_count=stats.total_params,
        client_fraction=stats.client_fraction,
        train_time=train_time,
        wait_time=wait_time,
    )
