"""Asynchronous offload framework over a simulated accelerator."""
from __future__ import annotations

from .bufferpool import AcquireMode, BufferPool, Census
from .core import (
    BusSpec,
    ClockMode,
    DeviceSpec,
    FeatureToggles,
    FrameworkConfig,
    GiB,
    Job,
    JobStatus,
    KiB,
    MiB,
    OffloadError,
    Stage,
    StageProfile,
    validate_config,
)
from .device import SimulatedBackend, transfer_time
from .model import Timeline, des_simulate, predicted_speedup, steady_state_period
from .scheduler import FinalStatus, Framework, init
from .workloads import DUMMY, SHA1, builtin_profile, load_profile, sha1_digest

__version__ = "0.1.0"

__all__ = [
    "AcquireMode",
    "BufferPool",
    "BusSpec",
    "Census",
    "ClockMode",
    "DUMMY",
    "DeviceSpec",
    "FeatureToggles",
    "FinalStatus",
    "Framework",
    "FrameworkConfig",
    "GiB",
    "Job",
    "JobStatus",
    "KiB",
    "MiB",
    "OffloadError",
    "SHA1",
    "SimulatedBackend",
    "Stage",
    "StageProfile",
    "Timeline",
    "builtin_profile",
    "des_simulate",
    "init",
    "load_profile",
    "predicted_speedup",
    "sha1_digest",
    "steady_state_period",
    "transfer_time",
    "validate_config",
]
