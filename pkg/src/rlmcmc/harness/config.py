"""Run configuration: nested dataclasses with a strict JSON round trip.

Geometry (channels, sources, wells) is given in physical coordinates on the
unit square, so one config works on any grid; channels are snapped to the fine
lattice when the experiment is built.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..errors import ConfigurationError
from ..field import ActionId

METHODS = ("mcmc", "rlmcmc", "erlmcmc")

ACTION_NAMES = {
    "shift-left": ActionId.SHIFT_LEFT,
    "shift-right": ActionId.SHIFT_RIGHT,
    "shift-down": ActionId.SHIFT_DOWN,
    "shift-up": ActionId.SHIFT_UP,
    "squeeze-h": ActionId.SQUEEZE_H,
    "stretch-h": ActionId.STRETCH_H,
    "squeeze-v": ActionId.SQUEEZE_V,
    "stretch-v": ActionId.STRETCH_V,
}


@dataclass
class GridConfig:
    fine_n: int = 40
    coarse_n: int = 8


@dataclass
class TargetConfig:
    # [x, y, w, h] lower-left corner and size, physical units
    rects: list[list[float]] = field(default_factory=list)
    # [x0, y0, x1, y1, half_width] rotated rectangles, physical units
    segments: list[list[float]] = field(default_factory=list)
    contrast: float = 1000.0


@dataclass
class TimeConfig:
    T_final: float = 1.0
    nt: int = 20


@dataclass
class PosteriorConfig:
    # absolute noise scale; when null, sigma_f_rel * ||F_obs|| is used
    sigma_f: Optional[float] = None
    sigma_f_rel: float = 0.01
    # modes per neighborhood for each coarse level, cheapest first
    basis_counts: list[int] = field(default_factory=lambda: [2, 4])


@dataclass
class InitConfig:
    # "random" draws each channel uniformly; "explicit" uses ``channels``
    kind: str = "random"
    channels: list[list[float]] = field(default_factory=list)
    # random channel sides are drawn from 1 .. max_size_frac * fine_n cells
    max_size_frac: float = 0.5


@dataclass
class RlConfig:
    gamma: float = 0.9
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    batch_size: int = 32
    tau_target: float = 0.99
    c1: float = 1.0
    c2: float = 0.0
    p_rl: float = 0.7
    buffer_capacity: int = 10_000
    max_trajectory: int = 1_000
    hidden: int = 32
    n_random: int = 32
    retry_cap: int = 50
    critic_local: bool = False


@dataclass
class ExperimentConfig:
    name: str = "exp1"
    method: str = "mcmc"
    # "chain" runs the multilevel sampler; "pure_rl" trains by acting without accept/reject
    mode: str = "chain"
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    # [x0, x1, y0, y1, amplitude]
    sources: list[list[float]] = field(default_factory=list)
    # [x0, x1, y0, y1]; null means the source boxes
    wells: Optional[list[list[float]]] = None
    time: TimeConfig = field(default_factory=TimeConfig)
    posterior: PosteriorConfig = field(default_factory=PosteriorConfig)
    init: InitConfig = field(default_factory=InitConfig)
    actions: list[str] = field(default_factory=lambda: list(ACTION_NAMES))
    rl: RlConfig = field(default_factory=RlConfig)
    # stop after this many accepted moves (chain) or updates (pure_rl)
    max_steps: int = 300
    max_proposals: int = 20_000
    # absolute misfit threshold; null means threshold_factor * misfit of the target itself
    threshold: Optional[float] = None
    threshold_factor: float = 1.5
    stop_at_threshold: bool = False
    # "wall" records elapsed milliseconds, "none" writes zeros (byte-stable traces)
    timing: str = "wall"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.mode not in ("chain", "pure_rl"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.timing not in ("wall", "none"):
            raise ConfigurationError(f"unknown timing {self.timing!r}")
        if self.init.kind not in ("random", "explicit"):
            raise ConfigurationError(f"unknown init kind {self.init.kind!r}")
        unknown = [a for a in self.actions if a not in ACTION_NAMES]
        if unknown or not self.actions:
            raise ConfigurationError(f"bad action list {self.actions}")
        if bool(self.target.rects) == bool(self.target.segments):
            raise ConfigurationError("target needs exactly one of rects or segments")
        if self.grid.fine_n % self.grid.coarse_n:
            raise ConfigurationError(
                f"fine_n={self.grid.fine_n} is not a multiple of coarse_n={self.grid.coarse_n}"
            )
        for r in self.target.rects:
            if len(r) != 4:
                raise ConfigurationError(f"target rect {r} needs 4 numbers")
        for s in self.target.segments:
            if len(s) != 5:
                raise ConfigurationError(f"target segment {s} needs 5 numbers")
        for b in self.sources:
            if len(b) != 5:
                raise ConfigurationError(f"source {b} needs [x0, x1, y0, y1, amplitude]")
        if self.init.kind == "explicit" and len(self.init.channels) != self.n_agents:
            raise ConfigurationError(
                f"{len(self.init.channels)} initial channels for {self.n_agents} agents"
            )
        counts = self.posterior.basis_counts
        if not counts or any(b < a for a, b in zip(counts, counts[1:])):
            raise ConfigurationError(f"basis_counts must be non-empty and non-decreasing: {counts}")
        if self.max_steps < 0 or self.max_proposals < 0:
            raise ConfigurationError("max_steps and max_proposals must be non-negative")

    @property
    def n_agents(self) -> int:
        return len(self.target.rects) or len(self.target.segments)

    @property
    def action_ids(self) -> tuple[ActionId, ...]:
        return tuple(ACTION_NAMES[a] for a in self.actions)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "config")

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def replace(self, **changes) -> "ExperimentConfig":
        return self.from_dict(_merge(self.to_dict(), changes))


def _merge(base: dict, changes: dict) -> dict:
    out = dict(base)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list")
        (inner,) = typing.get_args(tp)
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    return value
