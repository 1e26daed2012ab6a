"""Domain types shared by every module, plus configuration validation."""
from __future__ import annotations

import enum
import math
import os
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Optional

import numpy as np

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB


def to_ns(seconds: float) -> int:
    """Convert a duration in seconds to integer nanoseconds."""
    return int(round(seconds * 1e9))


def with_penalty_ns(cost_ns: int, penalty: float) -> int:
    """Cost of a copy staged through an internal pinned buffer."""
    return cost_ns + int(round(cost_ns * penalty))


# --------------------------------------------------------------------------- errors


class OffloadError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(OffloadError, ValueError):
    def __init__(self, message: str, violations: Optional[list] = None):
        super().__init__(message)
        self.violations = list(violations) if violations else [message]


class ZeroDevices(ConfigError):
    pass


class NonPositiveSize(ConfigError):
    pass


class PoolTooSmall(UserWarning):
    """Pool cannot keep every device pipeline full."""


class AllocationFailure(OffloadError):
    pass


class PoolFinalized(OffloadError):
    pass


class InvalidState(OffloadError):
    pass


class InvalidTransition(InvalidState):
    pass


class SizeExceeded(OffloadError, ValueError):
    pass


class FrameworkFinalized(OffloadError):
    pass


class UnknownJob(OffloadError, LookupError):
    pass


class UnknownProfile(OffloadError, LookupError):
    pass


class KernelFault(OffloadError):
    """A kernel raised or produced output that does not fit its buffer."""


class DeviceOutOfMemory(OffloadError):
    pass


# --------------------------------------------------------------------------- enums


class ClockMode(str, enum.Enum):
    VIRTUAL = "virtual"
    WALL = "wall"


class Stage(str, enum.Enum):
    OVERHEAD = "overhead"
    ALLOC = "alloc"
    COPY_IN = "copy_in"
    KERNEL = "kernel"
    COPY_OUT = "copy_out"
    POST = "post"

    @property
    def index(self) -> int:
        return _STAGE_INDEX[self]


STAGES = tuple(Stage)
_STAGE_INDEX = {s: i for i, s in enumerate(STAGES)}


class JobStatus(enum.Enum):
    IDLE = "idle"
    OUTSTANDING = "outstanding"
    RUNNING_COPY_IN = "running:copy_in"
    RUNNING_KERNEL = "running:kernel"
    RUNNING_COPY_OUT = "running:copy_out"
    DONE = "done"
    FAILED = "failed"

    @property
    def running(self) -> bool:
        return self in _RUNNING

    @property
    def terminal(self) -> bool:
        return self in (JobStatus.DONE, JobStatus.FAILED)

    @property
    def held_by_framework(self) -> bool:
        return self is JobStatus.OUTSTANDING or self in _RUNNING


_RUNNING = frozenset(
    {JobStatus.RUNNING_COPY_IN, JobStatus.RUNNING_KERNEL, JobStatus.RUNNING_COPY_OUT}
)

_ALLOWED = {
    JobStatus.IDLE: {JobStatus.OUTSTANDING, JobStatus.IDLE},
    JobStatus.OUTSTANDING: {JobStatus.RUNNING_COPY_IN},
    JobStatus.RUNNING_COPY_IN: {JobStatus.RUNNING_KERNEL, JobStatus.FAILED},
    JobStatus.RUNNING_KERNEL: {JobStatus.RUNNING_COPY_OUT, JobStatus.FAILED},
    JobStatus.RUNNING_COPY_OUT: {JobStatus.DONE, JobStatus.FAILED},
    JobStatus.DONE: {JobStatus.IDLE},
    JobStatus.FAILED: {JobStatus.IDLE},
}

_transition_hooks: list[Callable[["Job", JobStatus, JobStatus], None]] = []


def add_transition_hook(hook: Callable[["Job", JobStatus, JobStatus], None]) -> None:
    """Register ``hook(job, old, new)``; it runs on every status change."""
    _transition_hooks.append(hook)


def remove_transition_hook(hook) -> None:
    _transition_hooks.remove(hook)


# --------------------------------------------------------------------------- profiles


_PROFILE_STAGES = ("alloc", "copy_in", "kernel", "copy_out", "post")


@dataclass(frozen=True)
class StageProfile:
    """Per-job stage costs in seconds.

    ``alloc`` is only charged when buffer reuse is off.
    """

    alloc: float
    copy_in: float
    kernel: float
    copy_out: float
    post: float
    name: str = "custom"
    block_size: Optional[int] = None

    def __post_init__(self):
        for stage in _PROFILE_STAGES:
            value = getattr(self, stage)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"stage {stage} must be a finite duration >= 0, got {value!r}")

    @property
    def total(self) -> float:
        return self.alloc + self.copy_in + self.kernel + self.copy_out + self.post

    def fractions(self) -> dict[str, float]:
        total = self.total
        if total == 0:
            raise ValueError("fractions of an all-zero profile are undefined")
        return {s: getattr(self, s) / total for s in _PROFILE_STAGES}

    @classmethod
    def from_fractions(cls, total: float, fractions: dict[str, float], **kw) -> "StageProfile":
        missing = set(_PROFILE_STAGES) - set(fractions)
        extra = set(fractions) - set(_PROFILE_STAGES)
        if missing or extra:
            raise ValueError(f"fractions need exactly {_PROFILE_STAGES}; missing={sorted(missing)} extra={sorted(extra)}")
        s = math.fsum(fractions.values())
        if abs(s - 1.0) > 1e-9:
            raise ValueError(f"stage fractions must sum to 1 (+-1e-9), got {s!r}")
        if total <= 0:
            raise ValueError("total must be positive")
        return cls(**{k: total * fractions[k] for k in _PROFILE_STAGES}, **kw)

    def ns(self) -> dict[str, int]:
        return {s: to_ns(getattr(self, s)) for s in _PROFILE_STAGES}


# --------------------------------------------------------------------------- job


class Job:
    """One offload unit: pooled buffers plus the description of the work.

    Application code sets ``input_size``, ``output_size``, ``kernel_func`` and
    optionally ``callback_func`` / ``context`` / ``profile``; everything else is
    owned by the framework.
    """

    def __init__(self, slot: int, max_input_size: int, max_output_size: int, pool=None):
        self.slot = slot
        self.h_input = np.zeros(max_input_size, dtype=np.uint8)
        self.h_output = np.zeros(max_output_size, dtype=np.uint8)
        self.d_input: Optional[np.ndarray] = None
        self.d_output: Optional[np.ndarray] = None
        self.max_input_size = max_input_size
        self.max_output_size = max_output_size
        self.device: Optional[int] = None
        self.pinned_device: Optional[int] = None
        self._pool = pool
        self._in_idle_queue = False
        self.status = JobStatus.IDLE
        self.reset()

    def reset(self) -> None:
        self.id: Optional[int] = None
        self.input_size = 0
        self.output_size = 0
        self.kernel_func = None
        self.callback_func: Optional[Callable[["Job"], Any]] = None
        self.context: Any = None
        self.profile: Optional[StageProfile] = None
        self.failure: Optional[BaseException] = None
        self.timestamps: dict[Stage, tuple[int, int]] = {}
        self.submit_ns: Optional[int] = None
        self.finish_ns: Optional[int] = None

    def _transition(self, new: JobStatus) -> None:
        old = self.status
        if new not in _ALLOWED[old]:
            raise InvalidTransition(f"job {self.id} (slot {self.slot}): {old.value} -> {new.value}")
        self.status = new
        for hook in _transition_hooks:
            hook(self, old, new)

    @property
    def input(self) -> np.ndarray:
        return self.h_input[: self.input_size]

    @property
    def output(self) -> np.ndarray:
        return self.h_output[: self.output_size]

    def set_input(self, data) -> None:
        """Copy ``data`` into the pinned input buffer and set ``input_size``."""
        buf = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data.view(np.uint8).ravel()
        if buf.size > self.max_input_size:
            raise SizeExceeded(f"input of {buf.size} bytes exceeds max_input_size={self.max_input_size}")
        self.h_input[: buf.size] = buf
        self.input_size = int(buf.size)

    def __repr__(self):
        return f"Job(id={self.id}, slot={self.slot}, status={self.status.value}, device={self.device})"


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class DeviceSpec:
    id: int = 0
    copy_engines: int = 1
    alloc_cost: float = 1e-3
    alloc_cost_per_byte: float = 0.0
    memory_capacity: int = 512 * MiB

    def alloc_duration(self, nbytes: int) -> float:
        return self.alloc_cost + self.alloc_cost_per_byte * nbytes


@dataclass(frozen=True)
class BusSpec:
    channels: int = 1
    bandwidth: float = 3.0 * GiB
    latency: float = 65e-6
    pageable_penalty: float = 0.4


@dataclass(frozen=True)
class FeatureToggles:
    buffer_reuse: bool = True
    overlap: bool = True
    device_count_limit: Optional[int] = None
    pinned_host: bool = True


@dataclass(frozen=True)
class FrameworkConfig:
    max_input_size: int
    max_output_size: int
    pool_size: Optional[int] = None
    devices: tuple = (DeviceSpec(0),)
    bus: BusSpec = BusSpec()
    features: FeatureToggles = FeatureToggles()
    pipeline_depth: int = 3
    clock_mode: ClockMode = ClockMode.VIRTUAL
    framework_overhead_per_job: float = 70e-6
    post_workers: Optional[int] = None
    poll_interval: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "clock_mode", ClockMode(self.clock_mode))

    @property
    def active_devices(self) -> tuple:
        limit = self.features.device_count_limit
        return self.devices if limit is None else self.devices[: max(limit, 0)]

    @property
    def effective_depth(self) -> int:
        return self.pipeline_depth if self.features.overlap else 1

    def with_features(self, **kw) -> "FrameworkConfig":
        return replace(self, features=replace(self.features, **kw))


@dataclass(frozen=True)
class ValidatedConfig(FrameworkConfig):
    warnings: tuple = field(default=(), compare=False)


def validate_config(cfg: FrameworkConfig) -> ValidatedConfig:
    """Check ``cfg`` and fill in defaults.

    Raises the first violation found (``ZeroDevices``, ``NonPositiveSize`` or a
    plain ``ConfigError``) with every violation listed on ``.violations``.
    An undersized pool only warns.
    """
    if getattr(cfg, "_sealed", False):
        return cfg
    problems: list[ConfigError] = []

    if len(cfg.active_devices) == 0:
        problems.append(ZeroDevices("no devices configured (or device_count_limit < 1)"))
    for name in ("max_input_size", "max_output_size", "pipeline_depth"):
        if getattr(cfg, name) <= 0:
            problems.append(NonPositiveSize(f"{name} must be > 0, got {getattr(cfg, name)}"))
    if cfg.pool_size is not None and cfg.pool_size <= 0:
        problems.append(NonPositiveSize(f"pool_size must be > 0, got {cfg.pool_size}"))
    if cfg.post_workers is not None and cfg.post_workers <= 0:
        problems.append(NonPositiveSize(f"post_workers must be > 0, got {cfg.post_workers}"))
    if cfg.framework_overhead_per_job < 0:
        problems.append(NonPositiveSize("framework_overhead_per_job must be >= 0"))
    if cfg.poll_interval < 0:
        problems.append(NonPositiveSize("poll_interval must be >= 0"))
    if cfg.bus.channels < 1:
        problems.append(NonPositiveSize(f"bus.channels must be >= 1, got {cfg.bus.channels}"))
    if cfg.bus.bandwidth <= 0:
        problems.append(NonPositiveSize("bus.bandwidth must be > 0"))
    if cfg.bus.latency < 0 or cfg.bus.pageable_penalty < 0:
        problems.append(NonPositiveSize("bus.latency and bus.pageable_penalty must be >= 0"))
    ids = [d.id for d in cfg.devices]
    if len(set(ids)) != len(ids):
        problems.append(ConfigError(f"duplicate device ids: {ids}"))
    for d in cfg.devices:
        if d.copy_engines not in (1, 2):
            problems.append(ConfigError(f"device {d.id}: copy_engines must be 1 or 2"))
        if d.alloc_cost < 0 or d.alloc_cost_per_byte < 0:
            problems.append(NonPositiveSize(f"device {d.id}: allocation cost must be >= 0"))
        if d.memory_capacity <= 0:
            problems.append(NonPositiveSize(f"device {d.id}: memory_capacity must be > 0"))

    if problems:
        first = problems[0]
        first.violations = [str(p) for p in problems]
        raise first

    n_dev = len(cfg.active_devices)
    pool_size = cfg.pool_size if cfg.pool_size is not None else 4 * n_dev
    post_workers = cfg.post_workers
    if post_workers is None:
        post_workers = max(1, (os.cpu_count() or 1) - n_dev)

    notes = []
    if pool_size < cfg.pipeline_depth * n_dev:
        msg = (
            f"pool_size={pool_size} < pipeline_depth*devices={cfg.pipeline_depth * n_dev}; "
            "device pipelines cannot all be kept full"
        )
        warnings.warn(msg, PoolTooSmall, stacklevel=2)
        notes.append(msg)

    values = {f.name: getattr(cfg, f.name) for f in fields(FrameworkConfig)}
    values.update(pool_size=pool_size, post_workers=post_workers)
    out = ValidatedConfig(**values, warnings=tuple(notes))
    # dataclasses.replace() builds a fresh instance without this flag, so
    # modified copies get checked again
    object.__setattr__(out, "_sealed", True)
    return out
