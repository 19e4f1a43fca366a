"""Run configuration: defaults, config file, CLI flags, paper-mode preset.

Precedence, lowest to highest: built-in desk defaults, config file,
--paper-mode preset, explicit CLI flags. Unknown keys are rejected and
every validation problem is reported in one pass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError, ContractError
from .trainer import PAPER_MODE_OVERRIDES, TrainConfig

# the paper recipe needs room for its 512-token sequences
PAPER_MODE_RUN_OVERRIDES = dict(PAPER_MODE_OVERRIDES, max_positions=512)


@dataclass
class RunConfig:
    """Union of encoder, trainer, and pipeline settings for one CLI run."""

    # encoder architecture (desk defaults)
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 128
    adapter_dim: int = 16
    max_positions: int = 64
    dropout: float = 0.1
    pooling: str = "mean"
    languages: tuple[str, ...] = ("de", "fr", "it", "rm")

    # tokenizer
    max_vocab: int = 4096

    # training
    temperature: float = 0.05
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    freeze_adapters: bool = True
    max_len: int = 64

    # run
    seed: int = 0
    paper_mode: bool = False

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def resolve(cls, cli_overrides: dict, config_path: str | None = None) -> "RunConfig":
        """Merge defaults <- config file <- paper preset <- CLI flags."""
        values: dict = {}
        if config_path:
            try:
                with open(config_path, encoding="utf-8") as fh:
                    file_values = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
            if not isinstance(file_values, dict):
                raise ConfigError(f"config file {config_path} must hold a JSON object")
            unknown = set(file_values) - cls.field_names()
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            values.update(file_values)

        unknown = set(cli_overrides) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config overrides: {sorted(unknown)}")

        paper = cli_overrides.get("paper_mode", values.get("paper_mode", False))
        if paper:
            values.update(PAPER_MODE_RUN_OVERRIDES)
        values.update({k: v for k, v in cli_overrides.items() if v is not None})

        if "languages" in values:
            values["languages"] = tuple(values["languages"])
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Collect every problem across the derived configs, then raise once."""
        problems: list[str] = []
        try:
            self.encoder_config(vocab_size=max(self.max_vocab, 5))
        except ConfigError as exc:
            problems.append(str(exc))
        try:
            self.train_config()
        except ContractError as exc:
            problems.append(str(exc))
        if self.max_len > self.max_positions:
            problems.append(
                f"max_len ({self.max_len}) exceeds max_positions ({self.max_positions})")
        if self.max_vocab < 4:
            problems.append(f"max_vocab must be >= 4, got {self.max_vocab}")
        if problems:
            raise ConfigError("; ".join(problems))

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, hidden=self.hidden, layers=self.layers,
            heads=self.heads, ffn_dim=self.ffn_dim, adapter_dim=self.adapter_dim,
            languages=tuple(self.languages), max_positions=self.max_positions,
            dropout=self.dropout, pooling=self.pooling)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            temperature=self.temperature, learning_rate=self.learning_rate,
            batch_size=self.batch_size, epochs=self.epochs, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay,
            freeze_adapters=self.freeze_adapters, seed=self.seed,
            max_len=self.max_len)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["languages"] = list(self.languages)
        return out
