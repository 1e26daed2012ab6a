"""Accelerator backend contract and the simulated device.

Every asynchronous operation returns an :class:`Event` whose completion can
only be discovered by polling it. The simulated backend reserves its
resources at issue time with first-come first-served order:

* the bus: ``channels`` FIFO servers shared by every device; a copy takes the
  lowest-numbered channel that frees up first;
* each device's copy engine(s): with one engine a device's copy-in and
  copy-out serialize, with two they only contend for bus channels;
* each device's compute engine (one kernel at a time);
* the host: one serial server for framework overhead and ``post_workers``
  servers for post-processing;
* per-job allocation (buffer reuse off) occupies no shared resource.

Under the virtual clock the kernel function runs inline at issue and time only
moves when the owner advances the clock, so results are a pure function of
the configuration and the issue order. Under the wall clock kernels and post
functions run on host worker threads and an event completes once both its
modeled finish time has passed and the real work is done.

Device-side stages accept a ``ready`` time: a stage chained behind another
one on the same device is queued from its predecessor's modeled finish, the
way an asynchronous device stream runs back-to-back work without waiting for
the host to notice each step. Under the virtual clock this equals "now".
"""
from __future__ import annotations

import enum
import heapq
import itertools
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Optional

import numpy as np

from .core import (
    BusSpec,
    ClockMode,
    DeviceOutOfMemory,
    DeviceSpec,
    FrameworkConfig,
    Job,
    KernelFault,
    Stage,
    StageProfile,
    ValidatedConfig,
    to_ns,
    validate_config,
    with_penalty_ns,
)


def transfer_time(bus: BusSpec, size: int) -> float:
    """Seconds to move ``size`` bytes over ``bus``; 0 for an empty copy."""
    if size <= 0:
        return 0.0
    return bus.latency + size / bus.bandwidth


def enumerate_devices(cfg: FrameworkConfig) -> list[DeviceSpec]:
    """Device specs the framework will drive, honoring ``device_count_limit``."""
    return list(validate_config(cfg).active_devices)


# --------------------------------------------------------------------------- clocks


class VirtualClock:
    mode = ClockMode.VIRTUAL

    def __init__(self):
        self._now = 0

    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> None:
        if t < self._now:
            raise ValueError(f"virtual clock cannot go backwards ({t} < {self._now})")
        self._now = t

    def advance(self, dt: int) -> None:
        self.advance_to(self._now + dt)


class WallClock:
    mode = ClockMode.WALL

    # below this margin sleep() overshoots, so spin instead
    SPIN_NS = 200_000

    def __init__(self):
        self._t0 = time.perf_counter_ns()

    def now(self) -> int:
        return time.perf_counter_ns() - self._t0

    def sleep_until(self, t: int) -> None:
        while True:
            left = t - self.now()
            if left <= 0:
                return
            if left > self.SPIN_NS:
                time.sleep((left - self.SPIN_NS) / 1e9)
            else:
                time.sleep(0)

    def advance(self, dt: int) -> None:
        self.sleep_until(self.now() + dt)


def make_clock(mode: ClockMode):
    return VirtualClock() if ClockMode(mode) is ClockMode.VIRTUAL else WallClock()


# --------------------------------------------------------------------------- events


class EventStatus(enum.Enum):
    PENDING = "pending"
    COMPLETE = "complete"
    ERROR = "error"


class Event:
    """Completion token for one asynchronous stage."""

    __slots__ = ("seq", "kind", "job", "device", "start", "end", "error", "_clock", "_work", "_state")

    def __init__(self, seq, kind, job, device, start, end, clock, error=None, work=None):
        self.seq = seq
        self.kind: Stage = kind
        self.job: Optional[Job] = job
        self.device = device
        self.start = start
        self.end = end
        self.error = error
        self._clock = clock
        self._work: Optional[Future] = work
        self._state = EventStatus.PENDING

    def poll(self) -> EventStatus:
        if self._state is not EventStatus.PENDING:
            return self._state
        if self._clock.now() < self.end:
            return EventStatus.PENDING
        if self._work is not None:
            if not self._work.done():
                return EventStatus.PENDING
            exc = self._work.exception()
            if exc is not None:
                self.error = exc if isinstance(exc, (KernelFault, DeviceOutOfMemory)) else KernelFault(repr(exc))
            else:
                finished = self._work.result()
                if finished is not None and finished > self.end:
                    self.end = finished
        self._state = EventStatus.ERROR if self.error is not None else EventStatus.COMPLETE
        return self._state

    def __lt__(self, other):
        return (self.end, self.seq) < (other.end, other.seq)

    def __repr__(self):
        jid = self.job.id if self.job is not None else None
        return f"Event(seq={self.seq}, {self.kind.value}, job={jid}, dev={self.device}, {self.start}->{self.end}, {self._state.value})"


def event_poll(evt: Event) -> EventStatus:
    return evt.poll()


# --------------------------------------------------------------------------- resources


class Interconnect:
    """Shared bus: FIFO multi-channel server."""

    def __init__(self, spec: BusSpec):
        self.spec = spec
        self.free = [0] * spec.channels
        self.busy_ns = [0] * spec.channels

    def reserve(self, ready: int, engine_free: int, duration: int) -> tuple[int, int, int]:
        ch = min(range(len(self.free)), key=self.free.__getitem__)
        start = max(ready, self.free[ch], engine_free)
        end = start + duration
        self.free[ch] = end
        self.busy_ns[ch] += duration
        return ch, start, end


class _ServerBank:
    """``k`` identical FIFO servers; picks the one that frees up first."""

    def __init__(self, k: int):
        self.free = [0] * k

    def reserve(self, ready: int, duration: int) -> tuple[int, int]:
        i = min(range(len(self.free)), key=self.free.__getitem__)
        start = max(ready, self.free[i])
        self.free[i] = start + duration
        return start, start + duration


class DeviceHandle:
    """One simulated accelerator."""

    def __init__(self, backend: "SimulatedBackend", index: int, spec: DeviceSpec):
        self.backend = backend
        self.index = index
        self.spec = spec
        self.engine_free = [0, 0]
        self.compute_free = 0
        self.memory_used = 0
        self.allocation_calls = 0
        self.live_allocations = 0
        self.busy_ns = {"copy": 0, "kernel": 0}
        self._executor: Optional[ThreadPoolExecutor] = None

    def __repr__(self):
        return f"DeviceHandle({self.index}, id={self.spec.id})"

    # -- memory

    def allocate(self, nbytes: int) -> np.ndarray:
        if self.memory_used + nbytes > self.spec.memory_capacity:
            raise DeviceOutOfMemory(
                f"device {self.index}: {nbytes} bytes requested, "
                f"{self.spec.memory_capacity - self.memory_used} available"
            )
        self.memory_used += nbytes
        self.allocation_calls += 1
        self.live_allocations += 1
        return np.zeros(nbytes, dtype=np.uint8)

    def free(self, buf: Optional[np.ndarray]) -> None:
        if buf is None:
            return
        self.memory_used -= buf.size
        self.live_allocations -= 1

    # -- stages

    def alloc_async(self, job: Job, ready: Optional[int] = None) -> Event:
        b = self.backend
        with b.lock:
            now = b.clock.now() if ready is None else ready
            cost = b.cost_ns(job, Stage.ALLOC, self)
            err = None
            try:
                job.d_input = self.allocate(max(job.input_size, 1))
                job.d_output = self.allocate(max(job.output_size, 1))
            except DeviceOutOfMemory as exc:
                err = exc
                self.free(job.d_input)
                job.d_input = None
            return b._emit(Stage.ALLOC, job, self.index, now, now + cost, err)

    def _copy(self, job: Job, stage: Stage, ready: Optional[int]) -> Event:
        b = self.backend
        with b.lock:
            now = b.clock.now() if ready is None else ready
            cost = b.cost_ns(job, stage, self)
            engine = 0 if self.spec.copy_engines == 1 or stage is Stage.COPY_IN else 1
            _, start, end = b.bus.reserve(now, self.engine_free[engine], cost)
            self.engine_free[engine] = end
            self.busy_ns["copy"] += cost
            err = None
            try:
                if stage is Stage.COPY_IN:
                    job.d_input[: job.input_size] = job.h_input[: job.input_size]
                else:
                    job.h_output[: job.output_size] = job.d_output[: job.output_size]
            except (TypeError, ValueError) as exc:
                err = KernelFault(f"{stage.value}: device buffer unusable ({exc})")
            return b._emit(stage, job, self.index, start, end, err)

    def copy_in_async(self, job: Job, ready: Optional[int] = None) -> Event:
        return self._copy(job, Stage.COPY_IN, ready)

    def copy_out_async(self, job: Job, ready: Optional[int] = None) -> Event:
        return self._copy(job, Stage.COPY_OUT, ready)

    def launch_kernel_async(self, job: Job, ready: Optional[int] = None) -> Event:
        b = self.backend
        with b.lock:
            now = b.clock.now() if ready is None else ready
            cost = b.cost_ns(job, Stage.KERNEL, self)
            start = max(now, self.compute_free)
            end = start + cost
            self.compute_free = end
            self.busy_ns["kernel"] += cost
            if b.clock.mode is ClockMode.VIRTUAL:
                err = None
                try:
                    _run_kernel(job)
                except KernelFault as exc:
                    err = exc
                except Exception as exc:  # noqa: BLE001 - any kernel error is a fault
                    err = KernelFault(repr(exc))
                return b._emit(Stage.KERNEL, job, self.index, start, end, err)
            work = self._kernel_executor().submit(_run_kernel_timed, job, b.clock)
            return b._emit(Stage.KERNEL, job, self.index, start, end, None, work)

    def _kernel_executor(self) -> ThreadPoolExecutor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(1, thread_name_prefix=f"kernel{self.index}")
        return self._executor

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def _run_kernel(job: Job) -> None:
    kernel = job.kernel_func
    if kernel is None:
        raise KernelFault("job has no kernel_func")
    out = kernel(job.d_input[: job.input_size])
    if out is None:
        return
    out = np.frombuffer(out, dtype=np.uint8) if isinstance(out, (bytes, bytearray, memoryview)) else np.asarray(out, dtype=np.uint8).ravel()
    if out.size > job.d_output.size:
        raise KernelFault(f"kernel produced {out.size} bytes, device output buffer holds {job.d_output.size}")
    job.d_output[: out.size] = out


def _run_kernel_timed(job: Job, clock) -> int:
    _run_kernel(job)
    return clock.now()


def _run_post_timed(job: Job, clock) -> int:
    post = getattr(job.kernel_func, "post_func", None)
    if post is not None:
        post(job)
    return clock.now()


# --------------------------------------------------------------------------- backend


class SimulatedBackend:
    """Reference backend: devices, bus, host servers and an event calendar."""

    def __init__(self, cfg: FrameworkConfig, clock=None):
        self.cfg: ValidatedConfig = validate_config(cfg)
        self.clock = clock if clock is not None else make_clock(self.cfg.clock_mode)
        self.lock = threading.RLock()
        self.bus = Interconnect(self.cfg.bus)
        self.devices = [DeviceHandle(self, i, spec) for i, spec in enumerate(self.cfg.active_devices)]
        self.host = _ServerBank(1)
        self.post_bank = _ServerBank(self.cfg.post_workers)
        self._seq = itertools.count()
        self._calendar: list[Event] = []
        self._post_executor: Optional[ThreadPoolExecutor] = None
        # called from worker threads when real kernel/post work finishes
        self.on_work_done = None
        self.overhead_ns = to_ns(self.cfg.framework_overhead_per_job) if self.clock.mode is ClockMode.VIRTUAL else 0

    @property
    def virtual(self) -> bool:
        return self.clock.mode is ClockMode.VIRTUAL

    # -- timing model

    def cost_ns(self, job: Job, stage: Stage, device: Optional[DeviceHandle] = None) -> int:
        """Modeled duration of ``stage`` for ``job`` in nanoseconds."""
        if stage is Stage.OVERHEAD:
            return self.overhead_ns
        prof: Optional[StageProfile] = job.profile
        kernel = job.kernel_func
        if stage is Stage.ALLOC:
            if prof is not None:
                return to_ns(prof.alloc)
            return to_ns(device.spec.alloc_duration(job.input_size + job.output_size))
        if stage is Stage.KERNEL:
            if prof is not None:
                return to_ns(prof.kernel)
            duration = getattr(kernel, "duration", None)
            return to_ns(duration(job.input_size)) if duration is not None else 0
        if stage is Stage.POST:
            if prof is not None:
                return to_ns(prof.post)
            return to_ns(getattr(kernel, "post_duration", 0.0))
        if stage is Stage.COPY_IN:
            base = to_ns(prof.copy_in) if prof is not None else to_ns(transfer_time(self.cfg.bus, job.input_size))
        elif stage is Stage.COPY_OUT:
            if job.output_size == 0:
                return 0
            base = to_ns(prof.copy_out) if prof is not None else to_ns(transfer_time(self.cfg.bus, job.output_size))
        else:
            raise ValueError(stage)
        if not self.cfg.features.pinned_host:
            base = with_penalty_ns(base, self.cfg.bus.pageable_penalty)
        return base

    # -- host-side stages

    def overhead_async(self, job: Job, device: int) -> Event:
        with self.lock:
            start, end = self.host.reserve(self.clock.now(), self.overhead_ns)
            return self._emit(Stage.OVERHEAD, job, device, start, end, None)

    def post_async(self, job: Job, device: int) -> Event:
        with self.lock:
            cost = self.cost_ns(job, Stage.POST)
            start, end = self.post_bank.reserve(self.clock.now(), cost)
            if self.virtual:
                err = None
                post = getattr(job.kernel_func, "post_func", None)
                if post is not None:
                    try:
                        post(job)
                    except Exception as exc:  # noqa: BLE001
                        err = KernelFault(f"post-processing failed: {exc!r}")
                return self._emit(Stage.POST, job, device, start, end, err)
            if getattr(job.kernel_func, "post_func", None) is None:
                return self._emit(Stage.POST, job, device, start, end, None)
            if self._post_executor is None:
                self._post_executor = ThreadPoolExecutor(self.cfg.post_workers, thread_name_prefix="post")
            work = self._post_executor.submit(_run_post_timed, job, self.clock)
            return self._emit(Stage.POST, job, device, start, end, None, work)

    def _emit(self, kind, job, device, start, end, error, work=None) -> Event:
        evt = Event(next(self._seq), kind, job, device, start, end, self.clock, error, work)
        if work is not None and self.on_work_done is not None:
            work.add_done_callback(self.on_work_done)
        if self.virtual:
            heapq.heappush(self._calendar, evt)
        return evt

    # -- virtual calendar

    def next_event_time(self) -> Optional[int]:
        return self._calendar[0].end if self._calendar else None

    def pop_due(self, now: Optional[int] = None) -> Optional[Event]:
        """Pop the earliest due event (ties by issue order), or None."""
        now = self.clock.now() if now is None else now
        if self._calendar and self._calendar[0].end <= now:
            return heapq.heappop(self._calendar)
        return None

    def wait(self, evt: Event) -> EventStatus:
        """Block until ``evt`` completes; under the virtual clock, jump to it."""
        if self.virtual:
            if self.clock.now() < evt.end:
                self.clock.advance_to(evt.end)
            while self.pop_due() is not None:
                pass
            return evt.poll()
        if evt._work is not None:
            evt._work.exception()  # block (GIL released) until the worker is done
        self.clock.sleep_until(evt.end)
        return evt.poll()

    def charge_host(self, duration_ns: int) -> None:
        """Serial host work outside any job (pool initialization)."""
        if duration_ns <= 0:
            return
        if self.virtual:
            self.clock.advance(duration_ns)
        else:
            self.clock.sleep_until(self.clock.now() + duration_ns)

    def shutdown(self) -> None:
        for dev in self.devices:
            dev.shutdown()
        if self._post_executor is not None:
            self._post_executor.shutdown(wait=True)
            self._post_executor = None
