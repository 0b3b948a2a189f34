"""Experiment configuration: an INI-style ``key = value`` document.

Sections are ``[model]``, ``[train]``, ``[schedule]`` and ``[data]``. Every key
has a default; unknown sections or keys are rejected. :meth:`ExperimentConfig.to_text`
renders the fully resolved configuration, which is what every run logs.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass

from .model import ModelConfig
from .training import Schedule, TrainConfig

CONVERGED = "converged"

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {
        "vocab_size": "auto",
        "embed_dim": "64",
        "max_len": "20",
        "dilations": "1,2,4,8",
        "num_blocks": "4",
        "kernel_width": "3",
    },
    "train": {
        "learning_rate": "0.001",
        "batch_size": "256",
        "max_iterations": "20000",
        "eval_every": "100",
        "patience": "5",
        "beta1": "0.9",
        "beta2": "0.999",
        "eps": "1e-08",
        "seed": "0",
        "finetune_learning_rate": "none",
        "budget": CONVERGED,
    },
    "schedule": {
        "kind": "plain",
        "initial_blocks": "auto",
        "stack_times": "1",
        "mode": "adjacent",
        "budgets": "",
        "redilate": "false",
    },
    "data": {
        "train": "",
        "test": "",
        "split_ratio": "0.8",
        "split_seed": "0",
        "fractions": "1.0",
        "snapshot_seed": "0",
        "overlap": "0",
        "target_vocab": "auto",
    },
}


class ConfigError(ValueError):
    pass


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.replace(" ", "").split(",") if v)


def _floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.replace(" ", "").split(",") if v)


def _budget(value: str) -> int | None:
    value = value.strip().lower()
    return None if value in (CONVERGED, "none", "") else int(value)


def _bool(value: str) -> bool:
    value = value.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, str]]

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from None
        values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[section][key] = value.strip()
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if key not in DEFAULTS.get(section, {}):
            raise ConfigError(f"unknown key {section}.{key}")
        self.values[section][key] = str(value)

    def to_text(self) -> str:
        out = []
        for section, keys in self.values.items():
            out.append(f"[{section}]")
            out += [f"{k} = {v}" for k, v in keys.items()]
            out.append("")
        return "\n".join(out)

    def validate(self) -> None:
        """Convert every field once so bad values fail early, naming the key."""
        checks = [
            ("train", lambda: self.train_config()),
            ("schedule", lambda: self.schedule()),
            ("model", lambda: self.model_config(self._int_or("model", "vocab_size", 1))),
            ("data", lambda: (self.fractions(), float(self.get("data", "split_ratio")),
                              int(self.get("data", "split_seed")), int(self.get("data", "overlap")),
                              self._int_or("data", "target_vocab", 1),
                              int(self.get("data", "snapshot_seed")))),
        ]
        for section, check in checks:
            try:
                check()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid value in [{section}]: {exc}") from None

    def _int_or(self, section: str, key: str, fallback: int) -> int:
        value = self.get(section, key)
        return fallback if value == "auto" else int(value)

    def vocab_size(self) -> int | None:
        value = self.get("model", "vocab_size")
        return None if value == "auto" else int(value)

    def target_vocab(self) -> int | None:
        value = self.get("data", "target_vocab")
        return None if value == "auto" else int(value)

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=int(m["embed_dim"]),
            max_len=int(m["max_len"]),
            base_dilations=_ints(m["dilations"]),
            num_blocks=int(m["num_blocks"]),
            kernel_width=int(m["kernel_width"]),
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        ft = t["finetune_learning_rate"].lower()
        return TrainConfig(
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            max_iterations=int(t["max_iterations"]),
            eval_every=int(t["eval_every"]),
            patience=int(t["patience"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            eps=float(t["eps"]),
            seed=int(t["seed"]),
            finetune_learning_rate=None if ft == "none" else float(ft),
        )

    def budget(self) -> int | None:
        return _budget(self.get("train", "budget"))

    def schedule(self) -> Schedule:
        s = self.values["schedule"]
        initial = s["initial_blocks"]
        budgets = tuple(_budget(b) for b in s["budgets"].split(",")) if s["budgets"].strip() else ()
        return Schedule(
            kind=s["kind"],
            initial_blocks=int(self.get("model", "num_blocks")) if initial == "auto" else int(initial),
            stack_times=int(s["stack_times"]),
            mode=s["mode"],
            budgets=budgets,
            redilate=_bool(s["redilate"]),
        )

    def fractions(self) -> tuple[float, ...]:
        return _floats(self.get("data", "fractions"))
