"""Pre-allocated job shells recycled through a FIFO idle queue."""
from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import (
    AllocationFailure,
    DeviceOutOfMemory,
    FrameworkConfig,
    InvalidState,
    Job,
    JobStatus,
    PoolFinalized,
    UnknownJob,
    to_ns,
    validate_config,
)


class AcquireMode(enum.Enum):
    BLOCKING = "blocking"
    TRY = "try"


@dataclass
class PoolStats:
    gets: int = 0
    puts: int = 0
    blocking_waits: int = 0
    init_allocations: int = 0


@dataclass(frozen=True)
class Census:
    idle: int
    application: int
    framework: int

    @property
    def total(self) -> int:
        return self.idle + self.application + self.framework


class BufferPool:
    """Fixed set of job shells with pinned host buffers.

    With buffer reuse on, each shell also owns device buffers allocated once
    here; shell ``i`` lives on device ``i % len(devices)``.
    """

    def __init__(self, cfg: FrameworkConfig, devices: Sequence = (), backend=None):
        self.cfg = validate_config(cfg)
        self.capacity = self.cfg.pool_size
        self.max_input_size = self.cfg.max_input_size
        self.max_output_size = self.cfg.max_output_size
        self.devices = list(devices)
        self.reuse = self.cfg.features.buffer_reuse
        self.stats = PoolStats()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._finalized = False

        self._shells = [Job(i, self.max_input_size, self.max_output_size, pool=self) for i in range(self.capacity)]
        init_ns = 0
        if self.reuse:
            if not self.devices:
                raise AllocationFailure("buffer reuse needs at least one device to pin shells to")
            for shell in self._shells:
                dev = self.devices[shell.slot % len(self.devices)]
                shell.pinned_device = shell.device = dev.index
                try:
                    shell.d_input = dev.allocate(self.max_input_size)
                    shell.d_output = dev.allocate(self.max_output_size)
                except DeviceOutOfMemory as exc:
                    self._release_device_buffers()
                    raise AllocationFailure(f"pool pre-allocation failed: {exc}") from exc
                self.stats.init_allocations += 2
                init_ns += to_ns(dev.spec.alloc_duration(self.max_input_size + self.max_output_size))
        self.init_ns = init_ns
        if backend is not None:
            backend.charge_host(init_ns)

        self._idle: deque[Job] = deque(self._shells)
        for shell in self._shells:
            shell._in_idle_queue = True

    # -- public operations

    def acquire(self, mode: AcquireMode = AcquireMode.BLOCKING, timeout: Optional[float] = None) -> Optional[Job]:
        """Take an idle shell; ``None`` when ``mode`` is TRY and none is free."""
        with self._cond:
            if self._finalized:
                raise PoolFinalized("pool has been finalized")
            if not self._idle:
                if mode is AcquireMode.TRY:
                    return None
                self.stats.blocking_waits += 1
                if not self._cond.wait_for(lambda: self._idle or self._finalized, timeout):
                    return None
                if self._finalized:
                    raise PoolFinalized("pool finalized while waiting")
            job = self._idle.popleft()
            job._in_idle_queue = False
            job.reset()
            self.stats.gets += 1
            return job

    def release(self, job: Job) -> None:
        """Return ``job`` to the idle queue."""
        if job._pool is not self:
            raise UnknownJob(f"{job!r} does not belong to this pool")
        with self._cond:
            if job._in_idle_queue:
                raise InvalidState(f"{job!r} is already in the idle queue")
            if job.status not in (JobStatus.IDLE, JobStatus.DONE, JobStatus.FAILED):
                raise InvalidState(f"cannot release {job!r} while it is {job.status.value}")
            job._transition(JobStatus.IDLE)
            if not self.reuse:
                self.free_job_buffers(job)
                job.device = None
            self._idle.append(job)
            job._in_idle_queue = True
            self.stats.puts += 1
            self._cond.notify()

    def free_job_buffers(self, job: Job) -> None:
        """Drop per-job device buffers (buffer reuse off)."""
        if self.reuse or job.device is None:
            return
        dev = self.devices[job.device]
        dev.free(job.d_input)
        dev.free(job.d_output)
        job.d_input = None
        job.d_output = None

    def finalize(self) -> None:
        with self._cond:
            if self._finalized:
                return
            self._finalized = True
            self._cond.notify_all()
        self._release_device_buffers()

    # -- introspection

    @property
    def finalized(self) -> bool:
        return self._finalized

    @property
    def idle_count(self) -> int:
        return len(self._idle)

    @property
    def shells(self) -> tuple:
        return tuple(self._shells)

    @property
    def live_allocations(self) -> int:
        return sum(d.live_allocations for d in self.devices)

    @property
    def allocation_calls(self) -> int:
        return sum(d.allocation_calls for d in self.devices)

    def census(self) -> Census:
        """Count shells by holder; raises if the idle queue is inconsistent."""
        with self._lock:
            queued = list(self._idle)
            if len({id(j) for j in queued}) != len(queued):
                raise InvalidState("duplicate shell in idle queue")
            for j in queued:
                if j.status is not JobStatus.IDLE or not j._in_idle_queue:
                    raise InvalidState(f"{j!r} queued while {j.status.value}")
            fw = app = 0
            for j in self._shells:
                if j._in_idle_queue:
                    continue
                if j.status.held_by_framework:
                    fw += 1
                else:
                    app += 1
            return Census(idle=len(queued), application=app, framework=fw)

    def _release_device_buffers(self) -> None:
        for shell in self._shells:
            if shell.device is not None and self.devices:
                dev = self.devices[shell.device]
                dev.free(shell.d_input)
                dev.free(shell.d_output)
            shell.d_input = None
            shell.d_output = None
