"""Benchmark configuration: one YAML file, validated with field paths.

Every key is optional; omitted keys take the defaults below. ``STREAMGAUGE_OUT``
overrides ``output_dir`` and is the only environment variable consulted.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .core import KeyDistribution, WindowSpec
from .driver import SustainabilityPolicy
from .engine import EngineConfig
from .generator import GeneratorConfig, RateSchedule
from .protocol import QueryKind
from .sut import SutDescriptor

ENV_OUT = "STREAMGAUGE_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class WindowSection:
    range_ms: float = 800.0
    slide_ms: float = 400.0
    semantics: str = "event_time"


@dataclass
class KeyDistSection:
    mode: str = "normal"
    key_space: int = 100
    mean: float = 50.0
    stddev: float = 25.0
    fixed_key: int = 0


@dataclass
class PriceSection:
    min: int = 1
    max: int = 10_000


@dataclass
class GeneratorSection:
    instances: int = 2
    seed: int = 42
    key_dist: KeyDistSection = field(default_factory=KeyDistSection)
    purchases_share: float = 1.0
    price: PriceSection = field(default_factory=PriceSection)
    timestamping: str = "wall"
    calibrate_seconds: float = 5.0


@dataclass
class SutSection:
    mode: str = "in_process"
    address: Optional[str] = None
    name: str = "reference"
    parallelism: int = 2
    buffer_size: int = 4
    max_batch: int = 1024
    service_rate_cap: Optional[float] = None


@dataclass
class PolicySection:
    max_queue_seconds: float = 5.0
    growth_slope_fraction: float = 0.01
    observation_fraction: float = 0.5
    min_run: float = 30.0
    max_queue_depth: Optional[int] = None
    growth_slope_epsilon: Optional[float] = None


@dataclass
class MstSection:
    lo: float = 0.0
    hi: float = 200_000.0
    tol: float = 0.05
    probe_seconds: float = 30.0
    rate: Optional[float] = None  # fixed MST: skip the search


@dataclass
class RunSection:
    duration_s: float = 60.0
    warmup: float = 0.25
    drain_timeout_s: float = 60.0


@dataclass
class FluctuatingSection:
    enabled: bool = False
    segments: list = field(default_factory=lambda: [[10.0, 8400.0], [10.0, 2800.0], [10.0, 8400.0]])


@dataclass
class SkewSection:
    enabled: bool = False


@dataclass
class BenchConfig:
    query: str = "agg"
    window: WindowSection = field(default_factory=WindowSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    sut: SutSection = field(default_factory=SutSection)
    policy: PolicySection = field(default_factory=PolicySection)
    mst: MstSection = field(default_factory=MstSection)
    run: RunSection = field(default_factory=RunSection)
    fluctuating: FluctuatingSection = field(default_factory=FluctuatingSection)
    skew: SkewSection = field(default_factory=SkewSection)
    output_dir: str = "runs"

    # -- runtime objects ---------------------------------------------------

    def window_spec(self) -> WindowSpec:
        w = self.window
        return WindowSpec.from_ms(w.range_ms, w.slide_ms, w.semantics)

    def key_dist(self) -> KeyDistribution:
        k = self.generator.key_dist
        return KeyDistribution(k.mode, k.key_space, k.mean, k.stddev, k.fixed_key)

    def generator_config(self) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(
            instances=g.instances,
            rate_per_instance=1.0,
            total_events=1,
            seed=g.seed,
            key_dist=self.key_dist(),
            price_min=g.price.min,
            price_max=g.price.max,
            purchases_share=g.purchases_share,
            timestamping=g.timestamping,
        )

    def engine_config(self) -> EngineConfig:
        s = self.sut
        return EngineConfig(
            query=QueryKind[self.query.upper()],
            window=self.window_spec(),
            service_rate_cap=s.service_rate_cap,
            buffer_size=s.buffer_size,
            parallelism=s.parallelism,
            max_batch=s.max_batch,
        )

    def sut_descriptor(self) -> SutDescriptor:
        s = self.sut
        return SutDescriptor(s.name, s.mode, self.generator.instances, s.address)

    def policy_obj(self) -> SustainabilityPolicy:
        return SustainabilityPolicy(**dataclasses.asdict(self.policy))

    def fluctuating_schedule(self) -> Optional[RateSchedule]:
        if not self.fluctuating.enabled:
            return None
        return RateSchedule(tuple(tuple(seg) for seg in self.fluctuating.segments))

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(ENV_OUT) or self.output_dir)

    def validate(self) -> "BenchConfig":
        if self.query not in ("agg", "join"):
            raise ConfigError(f"query: expected 'agg' or 'join', got {self.query!r}")
        if not 0 <= self.run.warmup < 1:
            raise ConfigError("run.warmup: must lie in [0, 1)")
        if self.run.duration_s <= 0:
            raise ConfigError("run.duration_s: must be positive")
        m = self.mst
        if m.rate is None and not 0 <= m.lo < m.hi:
            raise ConfigError("mst: need 0 <= mst.lo < mst.hi")
        if not 0 < m.tol < 1:
            raise ConfigError("mst.tol: must lie in (0, 1)")
        if m.rate is not None and m.rate <= 0:
            raise ConfigError("mst.rate: must be positive")
        try:
            self.window_spec()
            self.generator_config()
            self.engine_config()
            self.sut_descriptor()
            self.policy_obj()
            self.fluctuating_schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if m.rate is None and m.probe_seconds < self.policy.min_run:
            raise ConfigError("mst.probe_seconds: must be >= policy.min_run")
        return self

    # -- (de)serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,), list: (list,)}


def _build(cls, data: Any, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], data[name], sub)
    return cls(**kwargs)


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    optional = typing.get_origin(tp) is typing.Union and type(None) in typing.get_args(tp)
    if optional:
        if value is None:
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    tp = typing.get_origin(tp) or tp
    allowed = _SCALARS[tp]
    if isinstance(value, bool) and tp is not bool:
        raise ConfigError(f"{path}: expected {tp.__name__}, got bool")
    if not isinstance(value, allowed):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__}")
    return float(value) if tp is float else value


def from_dict(data: dict) -> BenchConfig:
    return _build(BenchConfig, data, "").validate()


def parse(text: str) -> BenchConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: not valid YAML: {exc}") from None
    return from_dict(data or {})


def load(path) -> BenchConfig:
    return parse(Path(path).read_text())
