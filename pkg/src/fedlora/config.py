"""Experiment config files: a small INI dialect with strict key validation.

Every run writes the fully resolved config (defaults filled in) next to its
outputs, so any artifact can be reproduced from the copy alone.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .federation import FederationConfig

DATA_ROOT_ENV = "FEDLORA_DATA"

_SCHEMA: dict[str, dict[str, type]] = {
    "experiment": {"seeds": str, "output_dir": str},
    "dataset": {
        "kind": str,          # synthetic | cifar10
        "cifar_dir": str,
        "classes": int,
        "per_class": int,
        "test_per_class": int,
        "image_size": int,
        "noise": float,
        "task_seed": int,
    },
    "model": {"arch": str, "num_classes": int, "channels": str},
    "federation": {
        "mode": str,
        "num_clients": int,
        "sample_fraction": float,
        "rounds": int,
        "local_epochs": int,
        "batch_size": int,
        "lr": float,
        "momentum": float,
        "rank": int,
        "alpha_factor": float,
        "freeze_policy": str,
        "quant_bits": str,    # none | 2 | 4 | 8
        "partition_alpha": float,
        "parallel_clients": int,
    },
}


@dataclass
class ExperimentConfig:
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    output_dir: str = "runs/experiment"

    dataset_kind: str = "synthetic"
    cifar_dir: str = ""
    classes: int = 3
    per_class: int = 200
    test_per_class: int = 100
    image_size: int = 16
    noise: float = 0.5
    task_seed: int = 0

    arch: str = "tiny"
    num_classes: int = 0  # 0: follow the dataset
    channels: tuple[int, ...] = (16, 32, 32)

    mode: str = "lora"
    num_clients: int = 8
    sample_fraction: float = 1.0
    rounds: int = 20
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    rank: int = 16
    alpha_factor: float = 16.0
    freeze_policy: str = "plus_norm_plus_final_fc"
    quant_bits: int | None = None
    partition_alpha: float = 0.5
    parallel_clients: int = 1

    def __post_init__(self):
        if self.dataset_kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset kind must be synthetic or cifar10, got '{self.dataset_kind}'")
        if self.arch not in ("tiny", "resnet8", "resnet18"):
            raise ConfigError(f"model arch must be tiny/resnet8/resnet18, got '{self.arch}'")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if self.num_classes == 0:
            self.num_classes = self.classes if self.dataset_kind == "synthetic" else 10
        # surfaces value errors early
        self.federation_config(self.seeds[0])

    def federation_config(self, master_seed: int) -> FederationConfig:
        return FederationConfig(
            num_clients=self.num_clients,
            sample_fraction=self.sample_fraction,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            mode=self.mode,
            rank=self.rank,
            alpha_factor=self.alpha_factor,
            freeze_variant=self.freeze_policy,
            quant_bits=self.quant_bits,
            master_seed=master_seed,
            parallel_clients=self.parallel_clients,
        )

    def resolved_cifar_dir(self) -> str:
        return self.cifar_dir or os.environ.get(DATA_ROOT_ENV, "")


def _parse_value(section: str, key: str, raw: str):
    kind = _SCHEMA[section][key]
    raw = raw.strip()
    try:
        if key == "seeds":
            return [int(s) for s in raw.replace(",", " ").split()]
        if key == "channels":
            return tuple(int(s) for s in raw.replace(",", " ").split())
        if key == "quant_bits":
            return None if raw.lower() in ("none", "") else int(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse '{raw}'") from exc


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file, rejecting unknown sections/keys."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in section [{section}]")
            values[_FIELD_NAMES[(section, key)]] = _parse_value(section, key, raw)
    return ExperimentConfig(**values)


# config key -> dataclass field
_FIELD_NAMES = {
    ("experiment", "seeds"): "seeds",
    ("experiment", "output_dir"): "output_dir",
    ("dataset", "kind"): "dataset_kind",
    ("dataset", "cifar_dir"): "cifar_dir",
    ("dataset", "classes"): "classes",
    ("dataset", "per_class"): "per_class",
    ("dataset", "test_per_class"): "test_per_class",
    ("dataset", "image_size"): "image_size",
    ("dataset", "noise"): "noise",
    ("dataset", "task_seed"): "task_seed",
    ("model", "arch"): "arch",
    ("model", "num_classes"): "num_classes",
    ("model", "channels"): "channels",
    ("federation", "mode"): "mode",
    ("federation", "num_clients"): "num_clients",
    ("federation", "sample_fraction"): "sample_fraction",
    ("federation", "rounds"): "rounds",
    ("federation", "local_epochs"): "local_epochs",
    ("federation", "batch_size"): "batch_size",
    ("federation", "lr"): "lr",
    ("federation", "momentum"): "momentum",
    ("federation", "rank"): "rank",
    ("federation", "alpha_factor"): "alpha_factor",
    ("federation", "freeze_policy"): "freeze_policy",
    ("federation", "quant_bits"): "quant_bits",
    ("federation", "partition_alpha"): "partition_alpha",
    ("federation", "parallel_clients"): "parallel_clients",
}


def write_resolved(cfg: ExperimentConfig, path) -> None:
    """Emit the defaults-filled config in the same INI dialect."""
    lines = [
        "[experiment]",
        f"seeds = {', '.join(str(s) for s in cfg.seeds)}",
        f"output_dir = {cfg.output_dir}",
        "",
        "[dataset]",
        f"kind = {cfg.dataset_kind}",
        f"cifar_dir = {cfg.cifar_dir}",
        f"classes = {cfg.classes}",
        f"per_class = {cfg.per_class}",
        f"test_per_class = {cfg.test_per_class}",
        f"image_size = {cfg.image_size}",
        f"noise = {cfg.noise}",
        f"task_seed = {cfg.task_seed}",
        "",
        "[model]",
        f"arch = {cfg.arch}",
        f"num_classes = {cfg.num_classes}",
        f"channels = {', '.join(str(c) for c in cfg.channels)}",
        "",
        "[federation]",
        f"mode = {cfg.mode}",
        f"num_clients = {cfg.num_clients}",
        f"sample_fraction = {cfg.sample_fraction}",
        f"rounds = {cfg.rounds}",
        f"local_epochs = {cfg.local_epochs}",
        f"batch_size = {cfg.batch_size}",
        f"lr = {cfg.lr}",
        f"momentum = {cfg.momentum}",
        f"rank = {cfg.rank}",
        f"alpha_factor = {cfg.alpha_factor}",
        f"freeze_policy = {cfg.freeze_policy}",
        f"quant_bits = {'none' if cfg.quant_bits is None else cfg.quant_bits}",
        f"partition_alpha = {cfg.partition_alpha}",
        f"parallel_clients = {cfg.parallel_clients}",
        "",
    ]
    Path(path).write_text("\n".join(lines))
