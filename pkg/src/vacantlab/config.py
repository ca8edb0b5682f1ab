"""Experiment configuration in a flat ``key = value`` text form.

Lists are comma separated, an empty value means "unset", ``#`` starts a
comment.  ``ExperimentConfig.from_text(cfg.to_text()) == cfg`` for every
config.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, EpsilonOutOfRange, GeometryInfeasible
from .lattice import build_geometry

EXPERIMENTS = ("phase-sweep", "coupling-pipeline", "bound-check", "tabulate-potential")


@dataclass
class ExperimentConfig:
    experiment: str = "phase-sweep"
    d: int = 3
    N: int = 20
    gamma: float = 0.55
    chi: float = 0.1
    u: float = 1.0
    u_grid: tuple[float, ...] = ()
    sizes: tuple[int, ...] = ()  # phase sweep over several N; falls back to (N,)
    epsilon: tuple[float, ...] = (0.25,)
    beta: float = 0.0
    replicas: int = 100
    seed: int = 0
    kill_radius: float | None = None
    c: float = 1.0  # calibration constants of the coupling failure bound
    C: float = 1.0
    regime_c: float = 1.0  # epsilon^2 >= regime_c * N^(regime_delta - kappa)
    regime_delta: float | None = None  # None means kappa / 2
    sandwich_min: float | None = None  # asserted at target_epsilon
    target_epsilon: float | None = None
    max_crossing_shift: float | None = None
    n_grid: tuple[int, ...] = (200, 800, 3200)
    chains: int = 50
    max_states: int = 8
    tail_replicas: int = 2000
    threads: int = 1
    out: str = ""

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, validate: bool = True) -> "ExperimentConfig":
        types = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(value, types[key])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        cfg = cls(**values)
        if validate:
            cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, validate: bool = True) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), validate)

    def dump(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    # ------------------------------------------------------------ checks

    @property
    def kappa(self) -> float:
        return self.gamma * (self.d - 1) - 1

    def regime_floor(self) -> float:
        """Smallest epsilon allowed at this N."""
        delta = self.kappa / 2 if self.regime_delta is None else self.regime_delta
        return math.sqrt(self.regime_c * self.N ** (delta - self.kappa))

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.d < 1 or self.N < 2:
            raise ConfigError("need d >= 1 and N >= 2")
        if self.replicas < 1 or self.threads < 1:
            raise ConfigError("replicas and threads must be positive")
        if self.experiment == "phase-sweep":
            grid = list(self.u_grid)
            if not grid or any(u < 0 for u in grid) or grid != sorted(grid):
                raise ConfigError("u_grid must be a non-empty ascending list of levels >= 0")
        if self.experiment in ("coupling-pipeline", "tabulate-potential"):
            try:
                build_geometry(self.d, self.N, self.gamma, self.chi)
            except GeometryInfeasible as exc:
                raise ConfigError(str(exc)) from exc
        if self.experiment == "coupling-pipeline":
            if self.u < 0 or self.beta < 0:
                raise ConfigError("u and beta must be >= 0")
            if not self.epsilon or list(self.epsilon) != sorted(self.epsilon):
                raise ConfigError("epsilon must be a non-empty ascending list")
            if self.kappa <= 0:
                raise ConfigError(f"kappa = gamma (d-1) - 1 = {self.kappa} must be positive")
            if self.target_epsilon is not None and self.target_epsilon not in self.epsilon:
                raise ConfigError("target_epsilon must be one of the epsilon values")
            floor = self.regime_floor()
            for eps in self.epsilon:
                if not 0 < eps <= 1:
                    raise EpsilonOutOfRange(f"epsilon={eps} outside (0, 1]")
                if eps < floor:
                    raise EpsilonOutOfRange(f"epsilon={eps} below the regime floor {floor:.4g} at N={self.N}")
        if self.experiment == "bound-check":
            if not self.n_grid or list(self.n_grid) != sorted(self.n_grid):
                raise ConfigError("n_grid must be a non-empty ascending list")
            if not 2 <= self.max_states <= 8:
                raise ConfigError("max_states must lie in [2, 8]")
        return self


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, f: dataclasses.Field):
    kind = str(f.type)
    if text == "":
        if "None" in kind:
            return None
        if kind.startswith("tuple"):
            return ()
        if kind == "str":
            return ""
        raise ValueError("value required")
    if kind.startswith("tuple"):
        item = int if "int" in kind else float
        return tuple(item(t.strip()) for t in text.split(","))
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text
