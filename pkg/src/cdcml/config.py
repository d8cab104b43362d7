"""Flat key-value run configuration: file, environment, then CLI overrides.

The file format is line-oriented `key = value` with `#` comments.
Environment variables named CDCML_<KEY> override file values, and
explicit CLI flags override both. Unknown keys are rejected with the
offending line number. The fully resolved configuration is echoed into
every output directory so runs can be reproduced from their artifacts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .losses import ALL_TERMS, LossConfig
from .nn import ArchConfig, OptimizerState
from .trainer import TrainConfig

ENV_PREFIX = "CDCML_"


@dataclass(frozen=True)
class Field:
    name: str
    kind: str  # int | float | bool | str | ints
    default: Any
    help: str


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in str(text).replace(",", " ").split())


SCHEMA: dict[str, Field] = {
    f.name: f
    for f in [
        # training
        Field("batch_size", "int", 128, "pairs per SGD step"),
        Field("epochs", "int", 30, "training epochs"),
        Field("base_lr", "float", 1e-3, "initial learning rate"),
        Field("lr_decay_factor", "float", 0.1, "learning-rate decay multiplier"),
        Field("lr_decay_every", "int", 10, "epochs between decays"),
        Field("seed", "int", 0, "master seed for all purpose-keyed draws"),
        Field("mode", "str", "full", "loss family: full | similarity_only"),
        Field("separate_music_va", "bool", False, "per-modality VA heads instead of shared"),
        Field("checkpoint_every", "int", 0, "write a checkpoint every k epochs (0 = off)"),
        # losses
        Field("alpha", "float", 1.0, "matched-pair distance margin"),
        Field("epsilon", "float", 1e-8, "guard added inside every distance"),
        Field("loss_batch_normalize", "bool", False, "divide summed terms by batch size"),
        *[
            Field(f"enable_{t}", "bool", True, f"toggle the {t} loss term")
            for t in ALL_TERMS
        ],
        *[
            Field(f"weight_{t}", "float", 1.0, f"weight of the {t} loss term")
            for t in ALL_TERMS
        ],
        # architecture
        Field("embed_dim", "int", 512, "shared embedding width"),
        Field("branch_hidden", "ints", (512, 512), "branch hidden widths"),
        Field("sim_hidden", "ints", (512, 256), "similarity-head hidden widths"),
        Field("va_hidden", "ints", (512, 512), "VA-head hidden widths"),
        Field("sim_dropout", "float", 0.5, "dropout rate in the similarity head"),
        Field("va_dropout", "float", 0.0, "dropout rate in the VA head"),
        # pair policy
        Field("images_per_clip", "int", 50, "images paired with each clip"),
        Field("n_random", "int", 30, "random picks per clip"),
        Field("n_top", "int", 10, "highest-similarity picks per clip"),
        Field("n_bottom", "int", 10, "lowest-similarity picks per clip"),
        Field("sample_rate", "float", 0.1, "retained fraction of generated pairs"),
        # splits and sigma
        Field("ratio_train", "float", 0.80, "training split ratio"),
        Field("ratio_val", "float", 0.05, "validation split ratio"),
        Field("ratio_test", "float", 0.15, "test split ratio"),
        Field("sigma_mode", "str", "exact", "similarity scale: exact | sampled"),
        Field("sigma_samples", "int", 100000, "sample count for sampled sigma"),
        # outputs
        Field("figures", "bool", True, "render figures next to delimited outputs"),
    ]
}


def _parse_value(field: Field, raw: Any, where: str):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if field.kind == "int":
            return int(raw)
        if field.kind == "float":
            return float(raw)
        if field.kind == "bool":
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if field.kind == "ints":
            return _int_tuple(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad value for {field.name!r}: {exc}") from exc


class RunConfig:
    """Resolved configuration with schema-checked keys."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {name: f.default for name, f in SCHEMA.items()}
        if values:
            for key, value in values.items():
                self.set(key, value, where="<init>")

    def set(self, key: str, value: Any, where: str = "<override>") -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown configuration key {key!r}")
        self.values[key] = _parse_value(SCHEMA[key], value, where)

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    @classmethod
    def load(
        cls,
        config_path: str | Path | None = None,
        env: dict[str, str] | None = None,
        overrides: dict[str, Any] | None = None,
    ) -> "RunConfig":
        """Defaults, then file, then CDCML_* environment, then overrides."""
        cfg = cls()
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist")
            for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
                key, _, value = line.partition("=")
                cfg.set(key.strip(), value.strip(), where=f"{path}:{line_no}")
        env = os.environ if env is None else env
        for name in SCHEMA:
            env_key = ENV_PREFIX + name.upper()
            if env_key in env:
                cfg.set(name, env[env_key], where=f"environment {env_key}")
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
        return cfg

    def dump_text(self) -> str:
        lines = []
        for name in sorted(self.values):
            value = self.values[name]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def echo(self, out_dir: str | Path) -> Path:
        out = Path(out_dir) / "config-resolved.txt"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(self.dump_text())
        return out

    # builders for the typed configs

    def loss_config(self) -> LossConfig:
        if self["mode"] == "similarity_only":
            enabled = {t: t in ("sim", "cfr", "cfm") and self[f"enable_{t}"] for t in ALL_TERMS}
        else:
            enabled = {t: self[f"enable_{t}"] for t in ALL_TERMS}
        return LossConfig(
            alpha=self["alpha"],
            epsilon=self["epsilon"],
            weights={t: self[f"weight_{t}"] for t in ALL_TERMS},
            enabled=enabled,
            batch_normalize=self["loss_batch_normalize"],
        )

    def arch_config(self) -> ArchConfig:
        return ArchConfig(
            embed_dim=self["embed_dim"],
            branch_hidden=self["branch_hidden"],
            sim_hidden=self["sim_hidden"],
            va_hidden=self["va_hidden"],
            sim_dropout=self["sim_dropout"],
            va_dropout=self["va_dropout"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self["batch_size"],
            epochs=self["epochs"],
            optimizer=OptimizerState(
                base_lr=self["base_lr"],
                decay_factor=self["lr_decay_factor"],
                decay_every=self["lr_decay_every"],
            ),
            loss=self.loss_config(),
            seed=self["seed"],
            mode=self["mode"],
            arch=self.arch_config(),
            separate_music_va=self["separate_music_va"],
            checkpoint_every=self["checkpoint_every"],
        )

    def ratios(self) -> tuple[float, float, float]:
        return (self["ratio_train"], self["ratio_val"], self["ratio_test"])
