"""Run configuration: nested dataclasses read from and written to JSON.

Unknown keys are rejected at every level so typos cannot silently fall back
to defaults.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import List, Optional, Tuple

from .cubical import ESSENTIAL_POLICIES
from .descriptors import PiParams
from .prefilter import PREFILTER_MODES

DESCRIPTORS = ("pi", "pd_agg", "pi+pd_agg")
LOCAL_NORMS = ("none", "zstd", "minmax", "pstd")
SEED_ENV = "TOPOTEX_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClbpParams:
    n: int = 8
    r: int = 3
    encoding: str = "riu2"

    def __post_init__(self):
        if self.n not in (8, 16) or self.r not in (3, 5) or self.encoding not in ("ri", "riu2"):
            raise ConfigError(f"unsupported CLBP parameters n={self.n} r={self.r} encoding={self.encoding}")


@dataclass(frozen=True)
class FeatureConfig:
    patch_size: int = 128
    stride: int = 16
    descriptor: str = "pi"
    degrees: Tuple[int, ...] = (0, 1)
    essential_policy: str = "cap_at_max_value"
    local_norm: str = "none"
    prefilter: str = "none"
    clbp: ClbpParams = ClbpParams()
    # per-channel diagram limits for filtered channels; fitted on training data when None
    channel_limits: Optional[Tuple[Tuple[float, float], ...]] = None
    label_threshold: float = 0.5
    pi: PiParams = PiParams()

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(sorted(set(int(k) for k in self.degrees))))
        if self.channel_limits is not None:
            object.__setattr__(self, "channel_limits",
                               tuple((float(lo), float(hi)) for lo, hi in self.channel_limits))
        if self.patch_size < 2 or self.stride < 1:
            raise ConfigError("patch_size must be >= 2 and stride >= 1")
        if self.descriptor not in DESCRIPTORS:
            raise ConfigError(f"unknown descriptor {self.descriptor!r}; expected one of {DESCRIPTORS}")
        if not self.degrees or not set(self.degrees) <= {0, 1}:
            raise ConfigError("degrees must be a non-empty subset of {0, 1}")
        if self.essential_policy not in ESSENTIAL_POLICIES or self.essential_policy == "keep":
            raise ConfigError(f"essential_policy must be one of cap_at_max_value, cap_at_limit, drop")
        if self.local_norm not in LOCAL_NORMS:
            raise ConfigError(f"unknown local_norm {self.local_norm!r}; expected one of {LOCAL_NORMS}")
        if self.prefilter not in PREFILTER_MODES:
            raise ConfigError(f"unknown prefilter {self.prefilter!r}; expected one of {PREFILTER_MODES}")
        if not 0 < self.label_threshold <= 1:
            raise ConfigError("label_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class LearnerConfig:
    rounds: int = 200
    max_depth: int = 3


@dataclass(frozen=True)
class SelectionConfig:
    method: str = "fisher"     # fisher | gini | combined | random
    pct: float = 100.0


@dataclass(frozen=True)
class ProtocolConfig:
    repetitions: int = 10
    subset_fraction: float = 0.5
    folds: int = 5
    depth_grid: Tuple[int, ...] = (1, 2, 3)
    rounds_grid: Tuple[int, ...] = (50, 100, 200)
    selection: Optional[SelectionConfig] = None

    def __post_init__(self):
        object.__setattr__(self, "depth_grid", tuple(int(x) for x in self.depth_grid))
        object.__setattr__(self, "rounds_grid", tuple(sorted(int(x) for x in self.rounds_grid)))
        if self.repetitions < 1 or self.folds < 2:
            raise ConfigError("need repetitions >= 1 and folds >= 2")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigError("subset_fraction must lie in (0, 1]")
        if self.selection is not None and self.selection.method not in ("fisher", "gini", "combined", "random"):
            raise ConfigError(f"unknown selection method {self.selection.method!r}")


@dataclass(frozen=True)
class SynthSection:
    size: Tuple[int, int] = (256, 256)
    spacing_mean: float = 20.0
    spacing_jitter: float = 5.0
    pit_depth: float = 20.0
    pit_sigma: Optional[float] = None
    noise_rms: float = 1.0
    noise_corr_len: float = 8.0
    n_natural: int = 4
    n_engraved_i: int = 1
    n_engraved_ii: int = 1
    format: str = "f64raw"

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(x) for x in self.size))
        if self.format not in ("csv", "pgm16", "f64raw"):
            raise ConfigError(f"unknown map format {self.format!r}")


@dataclass(frozen=True)
class StabilitySection:
    snr_levels: Tuple[float, ...] = (5.0, 10.0, 15.0)
    offsets: Tuple[int, ...] = (4, 8, 16, 32, 64)
    n_patches: int = 100
    modes: Tuple[str, ...] = ("none", "schmid", "mr", "clbp")

    def __post_init__(self):
        object.__setattr__(self, "snr_levels", tuple(float(x) for x in self.snr_levels))
        object.__setattr__(self, "offsets", tuple(int(x) for x in self.offsets))
        object.__setattr__(self, "modes", tuple(self.modes))
        bad = [m for m in self.modes if m not in PREFILTER_MODES]
        if bad:
            raise ConfigError(f"unknown prefilter modes {bad}")


@dataclass(frozen=True)
class SweepSection:
    resolutions: Tuple[int, ...] = (8, 16, 32, 64)
    sigmas: Tuple[float, ...] = (0.00025, 0.0005, 0.001, 0.002)

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(x) for x in self.resolutions))
        object.__setattr__(self, "sigmas", tuple(float(x) for x in self.sigmas))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    features: FeatureConfig = FeatureConfig()
    learner: LearnerConfig = LearnerConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    synth: SynthSection = SynthSection()
    stability: StabilitySection = StabilitySection()
    sweep: SweepSection = SweepSection()


_NESTED = {
    (FeatureConfig, "clbp"): ClbpParams,
    (FeatureConfig, "pi"): PiParams,
    (RunConfig, "features"): FeatureConfig,
    (RunConfig, "learner"): LearnerConfig,
    (RunConfig, "protocol"): ProtocolConfig,
    (RunConfig, "synth"): SynthSection,
    (RunConfig, "stability"): StabilitySection,
    (RunConfig, "sweep"): SweepSection,
    (ProtocolConfig, "selection"): SelectionConfig,
}


def from_dict(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kw = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        if sub is not None and v is not None:
            kw[k] = from_dict(sub, v, f"{path}.{k}" if path else k)
        elif isinstance(v, list):
            kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def to_dict(obj) -> dict:
    return json.loads(json.dumps(asdict(obj)))


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(RunConfig, data)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_seed(cfg: RunConfig, flag: Optional[int]) -> RunConfig:
    """The ``--seed`` flag wins over the environment, which wins over the file."""
    if flag is not None:
        return replace(cfg, seed=int(flag))
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return replace(cfg, seed=int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}")
    return cfg


def derive_seed(master: int, purpose: str, index: int = 0) -> int:
    """Independent 63-bit seed for a named sub-experiment."""
    digest = hashlib.sha256(f"{int(master)}/{purpose}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
