"""The offload framework: job lifecycle, dispatch and per-device masters.

Jobs move through three holders. The pool's idle queue hands shells to the
application, submitted jobs wait in the FIFO outstanding queue, and dispatched
jobs sit in a device's running set (at most ``pipeline_depth`` of them, or one
with overlap off) until their copy-out finishes. Post-processing then runs on
the host worker bank, after which the job is Done and its callback fires.

Under the virtual clock nothing runs on its own: blocking calls (``job_get``,
``job_synch``, ``finalize``) drive a deterministic event loop, one completion
at a time. Under the wall clock each device gets a master thread that polls
its in-flight events.
"""
from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .bufferpool import AcquireMode, BufferPool, Census
from .core import (
    FrameworkConfig,
    FrameworkFinalized,
    InvalidState,
    Job,
    JobStatus,
    KiB,
    NonPositiveSize,
    SizeExceeded,
    Stage,
    UnknownJob,
    validate_config,
)
from .device import Event, EventStatus, SimulatedBackend
from .model import JobRecord, Timeline

log = logging.getLogger(__name__)

# how long a blocked virtual-mode caller sleeps before re-checking; only
# matters when other application threads hold every shell
_IDLE_WAIT = 0.05
# wall clock: a master polls continuously only this close to the next deadline
SPIN_NS = 150_000
_MAX_BLOCK = 0.01


@dataclass(frozen=True)
class FinalStatus:
    job_id: int
    status: JobStatus
    error: Optional[BaseException] = None

    @property
    def ok(self) -> bool:
        return self.status is JobStatus.DONE


class Master:
    """Control flow for one device: advances each job stage by stage."""

    def __init__(self, fw: "Framework", index: int):
        self.fw = fw
        self.index = index
        self.device = fw.backend.devices[index]
        self.inflight: list[Event] = []
        self.completed = 0
        self._thread: Optional[threading.Thread] = None
        self._stop = False

    def __repr__(self):
        return f"Master({self.index}, inflight={len(self.inflight)})"

    # -- stage sequencing (caller holds the framework lock)

    def track(self, evt: Event) -> None:
        if not self.fw.virtual:
            self.inflight.append(evt)

    def handle(self, evt: Event) -> None:
        fw = self.fw
        job = evt.job
        job.timestamps[evt.kind] = (evt.start - fw.t0, evt.end - fw.t0)
        if evt.error is not None:
            fw._fail(job, evt.error)
            return
        kind = evt.kind
        dev = self.device
        if kind is Stage.OVERHEAD and not fw.reuse:
            self.track(dev.alloc_async(job, evt.end))
        elif kind in (Stage.OVERHEAD, Stage.ALLOC):
            if fw.backend.cost_ns(job, Stage.COPY_IN, dev) == 0:
                self._launch(job, evt.end)
            else:
                self.track(dev.copy_in_async(job, evt.end))
        elif kind is Stage.COPY_IN:
            self._launch(job, evt.end)
        elif kind is Stage.KERNEL:
            job._transition(JobStatus.RUNNING_COPY_OUT)
            if fw.backend.cost_ns(job, Stage.COPY_OUT, dev) == 0:
                self._post(job)
            else:
                self.track(dev.copy_out_async(job, evt.end))
        elif kind is Stage.COPY_OUT:
            self._post(job)
        else:
            fw._complete(job)

    def _launch(self, job: Job, ready: int) -> None:
        job._transition(JobStatus.RUNNING_KERNEL)
        self.track(self.device.launch_kernel_async(job, ready))

    def _post(self, job: Job) -> None:
        self.fw._release_slot(job)
        if not self.fw.reuse:
            self.fw.pool.free_job_buffers(job)
        self.track(self.fw.backend.post_async(job, self.index))

    # -- wall-clock loop

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name=f"master{self.index}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self.fw._cond:
            self._stop = True
            self.fw._master_cond.notify_all()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def _run(self) -> None:
        fw = self.fw
        clock = fw.clock
        pause = fw.cfg.poll_interval
        while True:
            with fw._cond:
                if self._stop and not self.inflight:
                    return
                done = [e for e in self.inflight if e.poll() is not EventStatus.PENDING]
                if done:
                    ids = {id(e) for e in done}
                    self.inflight = [e for e in self.inflight if id(e) not in ids]
                    for evt in sorted(done):
                        self.handle(evt)
                    fw._dispatch_locked()
                    continue
                if not self.inflight:
                    fw._master_cond.wait(0.05)
                    continue
                # Sleep through the bulk of the wait so worker and application
                # threads get the interpreter; poll only near the next deadline.
                ends = [e.end for e in self.inflight if e._work is None or e._work.done()]
                left = min(ends) - clock.now() if ends else None
                if left is None or left > SPIN_NS:
                    fw._master_cond.wait(_MAX_BLOCK if left is None else (left - SPIN_NS) / 1e9)
                    continue
            time.sleep(pause)


class Framework:
    """Asynchronous offload framework over the simulated backend."""

    def __init__(self, cfg: FrameworkConfig, backend: Optional[SimulatedBackend] = None):
        self.cfg = validate_config(cfg)
        self.backend = backend if backend is not None else SimulatedBackend(self.cfg)
        self.clock = self.backend.clock
        self.virtual = self.backend.virtual
        self.reuse = self.cfg.features.buffer_reuse
        self.depth = self.cfg.effective_depth
        self.pool = BufferPool(self.cfg, self.backend.devices, self.backend)
        self._lock = self.backend.lock
        # application threads wait on _cond, wall-clock masters on _master_cond
        self._cond = threading.Condition(self._lock)
        self._master_cond = threading.Condition(self._lock)
        self.backend.on_work_done = self._wake

        n_dev = len(self.backend.devices)
        self.outstanding: deque[Job] = deque()
        self.running: list[set] = [set() for _ in range(n_dev)]
        self.masters = [Master(self, i) for i in range(n_dev)]
        self._rr = 0
        self._ids = itertools.count()
        self.t0: Optional[int] = None
        self._records: dict[int, JobRecord] = {}
        self._final: dict[int, FinalStatus] = {}
        self.submitted = 0
        self.completed = 0
        self.callback_errors: list[tuple[int, BaseException]] = []
        self._finalized = False

        if not self.virtual:
            for m in self.masters:
                m.start()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.finalize()

    def __repr__(self):
        return (
            f"Framework(devices={len(self.masters)}, clock={self.cfg.clock_mode.value}, "
            f"submitted={self.submitted}, completed={self.completed})"
        )

    # -- public API

    def job_get(self, mode: AcquireMode = AcquireMode.BLOCKING, timeout: Optional[float] = None) -> Optional[Job]:
        """Take a free job shell; ``None`` for TRY mode (or timeout) when none is free."""
        mode = AcquireMode(mode)
        if not self.virtual or mode is AcquireMode.TRY:
            return self.pool.acquire(mode, timeout)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                job = self.pool.acquire(AcquireMode.TRY)
                if job is not None:
                    return job
                if self._step():
                    continue
                if deadline is not None and time.monotonic() >= deadline:
                    return None
                self._cond.wait(_IDLE_WAIT)

    def job_put(self, job: Job) -> None:
        """Return ``job`` to the free pool."""
        self.pool.release(job)
        with self._cond:
            self._cond.notify_all()

    def job_submit(self, job: Job) -> None:
        """Queue ``job`` for execution; ownership passes to the framework."""
        self._check_owner(job)
        with self._cond:
            if self._finalized:
                raise FrameworkFinalized("framework has been finalized")
            if job.status is not JobStatus.IDLE or job._in_idle_queue:
                raise InvalidState(f"cannot submit {job!r}: caller must hold it idle")
            if job.input_size > job.max_input_size:
                raise SizeExceeded(f"input_size={job.input_size} > max_input_size={job.max_input_size}")
            if job.output_size > job.max_output_size:
                raise SizeExceeded(f"output_size={job.output_size} > max_output_size={job.max_output_size}")
            if job.input_size <= 0 or job.output_size < 0:
                raise NonPositiveSize(f"need input_size > 0 and output_size >= 0, got {job.input_size}/{job.output_size}")
            if job.kernel_func is None:
                raise InvalidState("job has no kernel_func")
            now = self.clock.now()
            if self.t0 is None:
                self.t0 = now
            job.id = next(self._ids)
            job.submit_ns = now - self.t0
            job.timestamps = {}
            job.failure = None
            if self.reuse:
                job.device = job.pinned_device
            job._transition(JobStatus.OUTSTANDING)
            self.outstanding.append(job)
            self.submitted += 1
            if not self.virtual:
                self._dispatch_locked()
                self._master_cond.notify_all()

    def job_query(self, job: Job) -> bool:
        """True once ``job`` has finished (Done or Failed)."""
        self._check_submitted(job)
        return job.status.terminal

    def job_synch(self, job: Job, timeout: Optional[float] = None) -> FinalStatus:
        """Block until ``job`` finishes and return its final status."""
        self._check_submitted(job)
        jid = job.id
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while jid not in self._final:
                if self.virtual and self._step():
                    continue
                if deadline is not None and time.monotonic() >= deadline:
                    raise TimeoutError(f"job {jid} still running")
                self._cond.wait(_IDLE_WAIT)
            return self._final[jid]

    def drain(self) -> None:
        """Block until every submitted job has finished."""
        with self._cond:
            while self.completed < self.submitted:
                if self.virtual and self._step():
                    continue
                self._cond.wait(_IDLE_WAIT)

    def finalize(self) -> None:
        """Finish every submitted job, stop the masters and free the pool."""
        with self._cond:
            if self._finalized:
                return
            self._finalized = True
        self.drain()
        for m in self.masters:
            m.stop()
        self.backend.shutdown()
        self.pool.finalize()

    @property
    def finalized(self) -> bool:
        return self._finalized

    def status(self, job_id: int) -> Optional[FinalStatus]:
        return self._final.get(job_id)

    def census(self) -> Census:
        """Pool census; also checks the framework's own queues agree with it."""
        with self._lock:
            c = self.pool.census()
            held = len(self.outstanding) + sum(len(r) for r in self.running)
            if held > c.framework:
                raise InvalidState(f"{held} jobs queued or running but pool counts {c.framework}")
            return c

    def timeline(self) -> Timeline:
        with self._lock:
            records = tuple(self._records[k] for k in sorted(self._records))
        makespan = max((r.end_ns for r in records), default=0)
        return Timeline(records, makespan, self.pool.init_ns)

    # -- event loop (virtual clock)

    def step(self) -> bool:
        """Advance the virtual event loop by one action; False when idle."""
        with self._lock:
            return self._step()

    def _step(self) -> bool:
        if not self.virtual:
            return False
        evt = self.backend.pop_due()
        if evt is not None:
            self.masters[evt.device].handle(evt)
            return True
        if self._dispatch_locked():
            return True
        t = self.backend.next_event_time()
        if t is None:
            return False
        self.clock.advance_to(t)
        return True

    # -- internals (framework lock held)

    def _dispatch_locked(self) -> int:
        """One FIFO pass over the outstanding queue; returns jobs dispatched."""
        if not self.outstanding:
            return 0
        n_dev = len(self.running)
        kept: deque[Job] = deque()
        dispatched = 0
        blocked = False
        for job in self.outstanding:
            d = None
            if self.reuse:
                if len(self.running[job.device]) < self.depth:
                    d = job.device
            elif not blocked:
                for k in range(n_dev):
                    cand = (self._rr + k) % n_dev
                    if len(self.running[cand]) < self.depth:
                        d = cand
                        break
                if d is None:
                    blocked = True
                else:
                    self._rr = (d + 1) % n_dev
                    job.device = d
            if d is None:
                kept.append(job)
                continue
            self.running[d].add(job)
            job._transition(JobStatus.RUNNING_COPY_IN)
            evt = self.backend.overhead_async(job, d)
            if self.virtual:
                self.masters[d].track(evt)
            else:
                # nothing is modeled for it on the wall clock; chain right away
                evt.poll()
                self.masters[d].handle(evt)
            dispatched += 1
        self.outstanding = kept
        return dispatched

    def _wake(self, _future=None) -> None:
        with self._lock:
            self._master_cond.notify_all()

    def _release_slot(self, job: Job) -> None:
        self.running[job.device].discard(job)

    def _complete(self, job: Job) -> None:
        job._transition(JobStatus.DONE)
        self._finish(job)

    def _fail(self, job: Job, error: BaseException) -> None:
        self._release_slot(job)
        job.failure = error
        job._transition(JobStatus.FAILED)
        self._finish(job)

    def _finish(self, job: Job) -> None:
        stamps = job.timestamps
        spans = tuple((s, *stamps[s]) for s in Stage if s in stamps)
        job.finish_ns = spans[-1][2]
        jid = job.id
        self._records[jid] = JobRecord(jid, job.device, job.submit_ns, spans)
        self._final[jid] = FinalStatus(jid, job.status, job.failure)
        self.completed += 1
        self.masters[job.device].completed += 1
        cb = job.callback_func
        if cb is not None:
            try:
                cb(job)
            except Exception as exc:  # noqa: BLE001 - a bad callback must not stop the master
                log.exception("callback for job %s raised", jid)
                self.callback_errors.append((jid, exc))
        self._cond.notify_all()

    def _check_owner(self, job: Job) -> None:
        if not isinstance(job, Job) or job._pool is not self.pool:
            raise UnknownJob(f"{job!r} was not obtained from this framework")

    def _check_submitted(self, job: Job) -> None:
        self._check_owner(job)
        if job.id is None:
            raise UnknownJob(f"{job!r} has not been submitted")


def init(max_input_size: int = 1024 * KiB, max_output_size: int = 20, **kw) -> Framework:
    """Build a framework from keyword arguments of :class:`FrameworkConfig`."""
    return Framework(FrameworkConfig(max_input_size=max_input_size, max_output_size=max_output_size, **kw))
