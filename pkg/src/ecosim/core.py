"""Domain types, configuration and the deterministic RNG shared by the simulator."""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid configuration values or schema violations."""


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed(seed: int, tag: str, *ids: int) -> int:
    """Derive a child integer seed from a parent seed, a tag and integer ids."""
    ss = np.random.SeedSequence([int(seed), _tag_code(tag), *(int(i) for i in ids)])
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**32], dtype=np.uint64))


class RngStream:
    """Counter-based stream keyed by (seed, tag, entity, step).

    Two streams built from the same key produce the same draws no matter
    when or in which order they are created.
    """

    __slots__ = ("key", "_generator")

    def __init__(self, seed: int, tag: str, entity: int = 0, step: int = 0):
        if min(seed, entity, step) < 0:
            raise ConfigError("rng key components must be non-negative")
        self.key = (int(seed), tag, int(entity), int(step))
        self._generator = None

    @property
    def generator(self) -> np.random.Generator:
        # built lazily: most provider steps never draw
        if self._generator is None:
            seed, tag, entity, step = self.key
            ss = np.random.SeedSequence([seed, _tag_code(tag), entity, step])
            self._generator = np.random.Generator(np.random.PCG64(ss))
        return self._generator

    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, lo: float, hi: float, size=None):
        return self.generator.uniform(lo, hi, size)

    def integers(self, lo: int, hi: int, size=None):
        return self.generator.integers(lo, hi, size)

    def choice(self, n: int, p=None, size=None):
        return self.generator.choice(n, p=p, size=size)


def sample_unit_preference(rng: RngStream, K: int) -> np.ndarray:
    """Isotropic unit vector in R^K (normalized Gaussian draw)."""
    if K < 2:
        raise ConfigError(f"need at least 2 topics, got K={K}")
    while True:
        v = rng.normal(K)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def sample_truncated_normal(rng: RngStream, mu: float, sigma: float,
                            lo: float = -1.0, hi: float = 1.0) -> float:
    """Normal(mu, sigma) conditioned on [lo, hi], by rejection."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if not lo < hi:
        raise ConfigError(f"empty truncation interval [{lo}, {hi}]")
    if sigma == 0:
        return float(min(max(mu, lo), hi))
    for _ in range(10_000):
        x = mu + sigma * float(rng.normal())
        if lo <= x <= hi:
            return x
    # acceptance region has negligible mass; fall back to the nearest bound
    return float(min(max(mu, lo), hi))


# ---------------------------------------------------------------------------
# Satisfaction functions
# ---------------------------------------------------------------------------

LINEAR = "linear"
SATURATED_LOG = "saturated_log"


@dataclass(frozen=True)
class SatisfactionFn:
    """Maps accumulated provider feedback to satisfaction.

    ``linear``: coefficient * (x + x0).
    ``saturated_log``: coefficient * log(1 + x + x0) above zero, continued
    linearly with matched slope below zero so that churn stays reachable.
    """

    kind: str = SATURATED_LOG
    coefficient: float = 1.0
    offset_x0: float = 0.0

    def __post_init__(self):
        if self.kind not in (LINEAR, SATURATED_LOG):
            raise ConfigError(f"unknown satisfaction kind {self.kind!r}")
        if not self.coefficient > 0:
            raise ConfigError("satisfaction coefficient must be > 0")

    def __call__(self, x):
        return satisfaction_value(self, x)


def satisfaction_value(f: SatisfactionFn, accumulated_feedback):
    z = np.asarray(accumulated_feedback, dtype=float) + f.offset_x0
    if f.kind == LINEAR:
        out = f.coefficient * z
    else:
        out = f.coefficient * np.where(z >= 0, np.log1p(np.maximum(z, 0.0)), z)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Entities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Document:
    id: int
    topic: int  # index of the one-hot topic
    quality: float
    provider_id: int
    created_at: int = 0

    def topic_vector(self, K: int) -> np.ndarray:
        v = np.zeros(K)
        v[self.topic] = 1.0
        return v


@dataclass(frozen=True)
class UserState:
    id: int
    preference: np.ndarray
    quality_sensitivity: float
    preference_drift: float


@dataclass(frozen=True)
class ProviderState:
    id: int
    preference: np.ndarray
    satisfaction_fn: SatisfactionFn
    no_rec_drift: float
    exposure_sensitivity: float
    feedback_sensitivity: float
    preference_drift: float
    viability_threshold: float
    creation_rate: float
    quality_mean: float
    quality_std: float
    accumulated_feedback: float = 0.0
    satisfaction: float = 0.0
    documents: tuple = ()
    viable: bool = True
    group: int = 0


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class UserParams:
    """Uniform ranges for per-user sensitivity parameters."""

    quality_sensitivity: tuple = (0.0, 1.0)
    preference_drift: tuple = (0.0, 0.2)


@dataclass
class ProviderGroup:
    size: int = 10
    no_rec_drift: float = -1.0
    exposure_sensitivity: float = 0.2
    feedback_sensitivity: float = 0.2
    preference_drift: float = 0.1
    satisfaction_fn: SatisfactionFn = field(default_factory=SatisfactionFn)
    viability_threshold: float = -1.0
    creation_rate: float = 2.0
    quality_mean: float = 0.0
    quality_std: float = 0.3


@dataclass
class EnvironmentConfig:
    num_topics: int = 10
    num_users: int = 50
    num_providers: int = 10
    initial_docs_per_provider: int = 20
    horizon: int = 20
    user_params: UserParams = field(default_factory=UserParams)
    provider_groups: list = field(default_factory=lambda: [ProviderGroup()])
    gamma_user: float = 0.99
    gamma_provider: float = 0.99
    seed: int = 0

    def validate(self) -> "EnvironmentConfig":
        if self.num_topics < 2:
            raise ConfigError("num_topics: need K >= 2")
        if self.horizon < 1:
            raise ConfigError("horizon: must be >= 1")
        if self.num_users < 1:
            raise ConfigError("num_users: must be >= 1")
        if self.initial_docs_per_provider < 0:
            raise ConfigError("initial_docs_per_provider: must be >= 0")
        if not self.provider_groups:
            raise ConfigError("provider_groups: at least one group required")
        if sum(g.size for g in self.provider_groups) != self.num_providers:
            raise ConfigError("provider_groups: sizes must sum to num_providers")
        for i, g in enumerate(self.provider_groups):
            path = f"provider_groups[{i}]"
            if g.size < 0:
                raise ConfigError(f"{path}.size: must be >= 0")
            if not g.no_rec_drift < 0:
                raise ConfigError(f"{path}.no_rec_drift: must be < 0")
            for name in ("exposure_sensitivity", "feedback_sensitivity",
                         "preference_drift", "creation_rate", "quality_std"):
                if getattr(g, name) < 0:
                    raise ConfigError(f"{path}.{name}: must be >= 0")
        for name in ("quality_sensitivity", "preference_drift"):
            lo, hi = getattr(self.user_params, name)
            if lo > hi:
                raise ConfigError(f"user_params.{name}: lo > hi")
        lo, hi = self.user_params.quality_sensitivity
        if lo < 0 or hi > 1:
            raise ConfigError("user_params.quality_sensitivity: must lie in [0, 1]")
        if self.user_params.preference_drift[0] < 0:
            raise ConfigError("user_params.preference_drift: must be >= 0")
        for name in ("gamma_user", "gamma_provider"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name}: must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EnvironmentConfig":
        return _from_dict(cls, data, "").validate()

    @classmethod
    def from_json(cls, text: str) -> "EnvironmentConfig":
        return cls.from_dict(json.loads(text))


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(x) for x in obj]
    return obj


_NESTED = {
    ("EnvironmentConfig", "user_params"): UserParams,
    ("EnvironmentConfig", "provider_groups"): [ProviderGroup],
    ("ProviderGroup", "satisfaction_fn"): SatisfactionFn,
}


def _from_dict(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path or '<root>'}: unknown field(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        nested = _NESTED.get((cls.__name__, key))
        try:
            if isinstance(nested, list):
                if not isinstance(value, list):
                    raise ConfigError(f"{sub}: expected a list")
                kwargs[key] = [_from_dict(nested[0], v, f"{sub}[{i}]") for i, v in enumerate(value)]
            elif nested is not None:
                kwargs[key] = _from_dict(nested, value, sub)
            elif isinstance(value, list):
                if len(value) != 2:
                    raise ConfigError(f"{sub}: expected [lo, hi]")
                kwargs[key] = tuple(float(v) for v in value)
            else:
                default = names[key].default
                if isinstance(default, bool):
                    kwargs[key] = bool(value)
                elif isinstance(default, int):
                    if isinstance(value, bool) or not isinstance(value, int):
                        raise ConfigError(f"{sub}: expected an integer")
                    kwargs[key] = value
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
                if isinstance(value, float) and not math.isfinite(value):
                    raise ConfigError(f"{sub}: must be finite")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{sub}: {exc}") from exc
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc
