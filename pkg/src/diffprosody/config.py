"""Run configuration: nested dataclasses loaded from strict JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import CorpusConfig
from .denoiser import DenoiserConfig, TrainConfig
from .errors import ConfigError
from .extractor import ExtractorConfig


# both predictors get the same budget so the comparison is about the objective
PREDICTOR_TRAINING = TrainConfig(steps=24000, batch_size=64, ema_decay=0.999)


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.05
    sigma: str = "std"

    def __post_init__(self):
        if self.sigma not in ("std", "variance"):
            raise ConfigError("schedule.sigma must be 'std' or 'variance'")


@dataclass(frozen=True)
class DataConfig:
    chunk_len: int = 5
    stride: int = 1
    test_fraction: float = 0.1
    d_s: int = 32

    def __post_init__(self):
        if self.chunk_len < 2 or self.stride < 1 or self.d_s < 1:
            raise ConfigError("need chunk_len >= 2, stride >= 1, d_s >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    bins: int = 20
    alpha: float = 0.05
    n_probes: int = 4
    count: int = 1000
    kmeans_restarts: int = 5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("eval.alpha must lie in (0, 1)")
        if self.bins < 1 or self.n_probes < 1 or self.count < 1 or self.kmeans_restarts < 1:
            raise ConfigError("eval sizes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(n_conversations=20000))
    data: DataConfig = field(default_factory=DataConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainConfig = field(default_factory=lambda: PREDICTOR_TRAINING)
    baseline_training: TrainConfig = field(default_factory=lambda: PREDICTOR_TRAINING)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        ex, dn = self.extractor, self.denoiser
        if (ex.m, ex.d) != (dn.m, dn.d):
            raise ConfigError("extractor and denoiser disagree on prosody shape (m, d)")
        if dn.d_s != self.data.d_s:
            raise ConfigError("denoiser.d_s must equal data.d_s")
        if dn.n_context != self.data.chunk_len - 1:
            raise ConfigError("denoiser.n_context must equal data.chunk_len - 1")
        if self.corpus.frames_min < 4 * ex.m:
            raise ConfigError("need m <= frames_min / 4 so pooling actually compresses")

    def to_dict(self) -> dict:
        body = asdict(self)
        del body["corpus"]["seed"]  # the corpus always runs on the global seed
        return body

    def hash(self) -> str:
        """Digest of everything except the seed, which artifacts record separately."""
        body = self.to_dict()
        del body["seed"]
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))


def _build(cls, data, path: str, base=None):
    """Overlay ``data`` on ``base`` (the run's defaults for this section)."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    if cls is CorpusConfig and "seed" in data:
        raise ConfigError("corpus.seed is derived from the global seed; set 'seed' at the top level")
    base = cls() if base is None else base
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, where, getattr(base, key))
        elif isinstance(value, list):
            kwargs[key] = _freeze(value)
        else:
            kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _freeze(value):
    return tuple(_freeze(v) for v in value) if isinstance(value, list) else value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 63-bit seed for one named use of the global seed."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
