"""Experiment configuration and seed fan-out."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from hashview.errors import InvalidInputError
from hashview.keyselect import Strategy


def derive_seed(root: int, tag: str, index: int = 0) -> int:
    """Deterministic 63-bit child seed for ``(root, purpose tag, index)``."""
    if root < 0 or index < 0:
        raise InvalidInputError("seeds and indices must be non-negative")
    ss = np.random.SeedSequence([int(root) & (2**64 - 1), zlib.crc32(tag.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.replace(",", " ").split())


@dataclass
class ExperimentConfig:
    strategy: str = "tbv"
    tables: int = 1
    objects: int = 3
    views: int = 3115
    epsilon: float = 0.1
    seed: int = 0
    seeds: tuple[int, ...] = (0,)
    database_sizes: tuple[int, ...] = ()
    out: str = "out"
    scenes: int = 20
    plants: int = 3
    clutter: float = 0.15
    fg_density: float = 0.5
    coherence: float = 0.7
    target_recall: float = 0.98
    strategies: tuple[str, ...] = ("rbs", "pbs", "tbs", "tbv")
    exhaustive: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        Strategy.parse(self.strategy)
        for name in self.strategies:
            Strategy.parse(name)
        for name in ("tables", "objects", "views", "scenes"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.plants < 0:
            raise InvalidInputError("plants must be >= 0")
        if not 0.0 <= self.epsilon < 0.5:
            raise InvalidInputError("epsilon must lie in [0, 0.5)")
        if not 0.0 <= self.clutter <= 1.0 or not 0.0 < self.fg_density <= 1.0:
            raise InvalidInputError("densities must lie in [0, 1]")
        if not 0.0 <= self.coherence <= 1.0 or not 0.0 <= self.target_recall <= 1.0:
            raise InvalidInputError("coherence and target_recall must lie in [0, 1]")
        if self.seed < 0 or any(s < 0 for s in self.seeds):
            raise InvalidInputError("seeds must be non-negative")
        if any(s < 1 for s in self.database_sizes):
            raise InvalidInputError("database sizes must be positive")
        if list(self.database_sizes) != sorted(self.database_sizes):
            raise InvalidInputError("database sizes must be ascending")
        return self

    # -- key=value text -----------------------------------------------------

    @staticmethod
    def _convert(name: str, text: str):
        kinds = {f.name: f.type for f in fields(ExperimentConfig) if f.init}
        if name not in kinds:
            raise InvalidInputError(f"unknown config key {name!r}")
        kind = kinds[name]
        try:
            if kind == "int":
                return int(text)
            if kind == "float":
                return float(text)
            if kind == "bool":
                if text.lower() in ("1", "true", "yes", "on"):
                    return True
                if text.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            if kind == "tuple[int, ...]":
                return _int_list(text)
            if kind == "tuple[str, ...]":
                return tuple(s.lower() for s in _str_list(text))
            return text.strip()
        except ValueError:
            raise InvalidInputError(f"bad value for {name}: {text!r}") from None

    @classmethod
    def parse_text(cls, text: str, origin: str = "<config>") -> dict:
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{origin}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            values[key] = cls._convert(key, value)
        return values

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        values = cls.parse_text(path.read_text(), str(path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if not f.init:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def echo(self, directory: str | Path, name: str = "config.txt") -> Path:
        """Write the effective config next to the outputs."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / name
        path.write_text(self.to_text())
        return path
