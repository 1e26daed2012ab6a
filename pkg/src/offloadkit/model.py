"""Discrete-event oracle and closed-form steady-state estimates.

The oracle replays a stream of jobs against the timing model with flat arrays
and a brute-force search for the next event. It shares no scheduling code with
:mod:`offloadkit.scheduler`; only the timing rules are common:

* the stream is closed-loop: ``pool_size`` jobs are submitted at time 0 and
  every later job is submitted the instant a finished job's shell is returned
  (shells recycle FIFO, so with buffer reuse a job runs on its shell's device);
* a job is dispatched into one of ``depth`` slots on a device (1 when overlap
  is off); it then passes overhead -> [alloc] -> copy-in -> kernel ->
  copy-out, releases its slot, and finishes with post-processing;
* zero-length copies are skipped; every other stage is an activity even when
  its cost is zero;
* at each instant, due activities complete in issue order, then the FIFO
  outstanding queue is scanned for dispatch; this repeats until nothing more
  happens at that instant.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import _accel
from .core import STAGES, FrameworkConfig, Stage, StageProfile, to_ns, validate_config, with_penalty_ns

_OVERHEAD, _ALLOC, _COPY_IN, _KERNEL, _COPY_OUT, _POST = range(6)


# --------------------------------------------------------------------------- timeline


@dataclass(frozen=True)
class JobRecord:
    job_id: int
    device_id: int
    submit_ns: int
    spans: tuple  # ((Stage, start_ns, end_ns), ...) in stage order

    def span(self, stage: Stage) -> Optional[tuple[int, int]]:
        for s, a, b in self.spans:
            if s is stage:
                return a, b
        return None

    @property
    def end_ns(self) -> int:
        return self.spans[-1][2]

    @property
    def latency_ns(self) -> int:
        return self.end_ns - self.submit_ns


@dataclass(frozen=True)
class Timeline:
    """Per-job stage times relative to the first submission."""

    records: tuple
    makespan_ns: int
    init_ns: int = 0

    @property
    def n_jobs(self) -> int:
        return len(self.records)

    @property
    def makespan(self) -> float:
        return self.makespan_ns / 1e9

    @property
    def throughput(self) -> float:
        return self.n_jobs / self.makespan if self.makespan_ns > 0 else float("inf")

    def busy_ns(self, stage: Stage) -> int:
        total = 0
        for r in self.records:
            sp = r.span(stage)
            if sp is not None:
                total += sp[1] - sp[0]
        return total

    def to_csv(self, path: Union[str, Path, None] = None) -> str:
        """CSV with columns job_id, device_id, stage, start_us, end_us."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["job_id", "device_id", "stage", "start_us", "end_us"])
        for r in self.records:
            for stage, a, b in r.spans:
                w.writerow([r.job_id, r.device_id, stage.value, f"{a / 1000:.3f}", f"{b / 1000:.3f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def build_timeline(job_ids, devices, submits, starts, ends, init_ns=0) -> Timeline:
    records = []
    for i in range(len(job_ids)):
        spans = tuple(
            (STAGES[s], int(starts[i, s]), int(ends[i, s])) for s in range(len(STAGES)) if starts[i, s] >= 0
        )
        records.append(JobRecord(int(job_ids[i]), int(devices[i]), int(submits[i]), spans))
    makespan = max((r.end_ns for r in records), default=0)
    return Timeline(tuple(records), int(makespan), int(init_ns))


# --------------------------------------------------------------------------- kernel


@_accel.jit
def _argmin(a):
    best = 0
    for i in range(1, a.size):
        if a[i] < a[best]:
            best = i
    return best


@_accel.jit
def _simulate(cost, n_dev, depth, pool_size, reuse, engines, channels, post_workers):
    n = cost.shape[0]
    start = np.full((n, 6), -1, np.int64)
    end = np.full((n, 6), -1, np.int64)
    device = np.full(n, -1, np.int64)
    submit = np.zeros(n, np.int64)
    stage = np.full(n, -1, np.int64)
    due = np.zeros(n, np.int64)
    seq_of = np.zeros(n, np.int64)
    queued = np.zeros(n, np.bool_)

    active = np.empty(n, np.int64)
    n_active = 0

    idle = np.empty(pool_size, np.int64)
    for i in range(pool_size):
        idle[i] = i % n_dev  # a shell is pinned to device slot % n_dev
    idle_head = 0
    idle_len = pool_size

    running = np.zeros(n_dev, np.int64)
    ch_free = np.zeros(channels, np.int64)
    eng_free = np.zeros((n_dev, 2), np.int64)
    comp_free = np.zeros(n_dev, np.int64)
    post_free = np.zeros(post_workers, np.int64)
    host_free = 0
    seq = 0
    rr = 0
    submitted = 0
    finished = 0
    t = 0

    while submitted < n and idle_len > 0:
        shell = idle[idle_head]
        idle_head = (idle_head + 1) % pool_size
        idle_len -= 1
        if reuse:
            device[submitted] = shell
        submit[submitted] = t
        queued[submitted] = True
        submitted += 1

    while finished < n:
        while True:
            # earliest-issued activity due now
            pick = -1
            for a in range(n_active):
                j = active[a]
                if due[j] <= t and (pick < 0 or seq_of[j] < seq_of[active[pick]]):
                    pick = a
            if pick >= 0:
                j = active[pick]
                n_active -= 1
                active[pick] = active[n_active]
                s = stage[j]
                d = device[j]
                nxt = -1
                if s == _OVERHEAD:
                    nxt = _COPY_IN if reuse else _ALLOC
                elif s == _ALLOC:
                    nxt = _COPY_IN
                elif s == _COPY_IN:
                    nxt = _KERNEL
                elif s == _KERNEL:
                    nxt = _COPY_OUT
                elif s == _COPY_OUT:
                    nxt = _POST
                else:
                    finished += 1
                    stage[j] = 7
                    shell_back = (idle_head + idle_len) % pool_size
                    idle_len += 1
                    idle[shell_back] = device[j] if reuse else 0
                    while submitted < n and idle_len > 0:
                        shell = idle[idle_head]
                        idle_head = (idle_head + 1) % pool_size
                        idle_len -= 1
                        if reuse:
                            device[submitted] = shell
                        submit[submitted] = t
                        queued[submitted] = True
                        submitted += 1
                    continue
                if nxt == _COPY_IN and cost[j, _COPY_IN] == 0:
                    nxt = _KERNEL
                if nxt == _COPY_OUT and cost[j, _COPY_OUT] == 0:
                    nxt = _POST
                if nxt == _POST:
                    running[d] -= 1

                c = cost[j, nxt]
                if nxt == _ALLOC:
                    b = t
                elif nxt == _COPY_IN or nxt == _COPY_OUT:
                    ch = _argmin(ch_free)
                    eng = 0
                    if engines[d] == 2 and nxt == _COPY_OUT:
                        eng = 1
                    b = max(t, ch_free[ch], eng_free[d, eng])
                    ch_free[ch] = b + c
                    eng_free[d, eng] = b + c
                elif nxt == _KERNEL:
                    b = max(t, comp_free[d])
                    comp_free[d] = b + c
                else:
                    w = _argmin(post_free)
                    b = max(t, post_free[w])
                    post_free[w] = b + c
                start[j, nxt] = b
                end[j, nxt] = b + c
                stage[j] = nxt
                due[j] = b + c
                seq_of[j] = seq
                seq += 1
                active[n_active] = j
                n_active += 1
                continue

            # dispatch round over the FIFO outstanding queue
            dispatched = 0
            blocked = False
            for j in range(submitted):
                if not queued[j]:
                    continue
                d = -1
                if reuse:
                    if running[device[j]] < depth:
                        d = device[j]
                elif not blocked:
                    for k in range(n_dev):
                        cand = (rr + k) % n_dev
                        if running[cand] < depth:
                            d = cand
                            break
                    if d < 0:
                        blocked = True
                    else:
                        rr = (d + 1) % n_dev
                        device[j] = d
                if d < 0:
                    continue
                queued[j] = False
                running[d] += 1
                b = max(t, host_free)
                host_free = b + cost[j, _OVERHEAD]
                start[j, _OVERHEAD] = b
                end[j, _OVERHEAD] = host_free
                stage[j] = _OVERHEAD
                due[j] = host_free
                seq_of[j] = seq
                seq += 1
                active[n_active] = j
                n_active += 1
                dispatched += 1
            if dispatched == 0:
                break

        if finished == n:
            break
        nxt_t = -1
        for a in range(n_active):
            j = active[a]
            if nxt_t < 0 or due[j] < nxt_t:
                nxt_t = due[j]
        t = nxt_t

    return device, submit, start, end


# --------------------------------------------------------------------------- API


def stage_costs_ns(profile: StageProfile, cfg: FrameworkConfig) -> np.ndarray:
    """Per-stage modeled costs (ns) for one job of ``profile`` under ``cfg``."""
    cfg = validate_config(cfg)
    reuse = cfg.features.buffer_reuse
    row = np.zeros(6, np.int64)
    row[_OVERHEAD] = to_ns(cfg.framework_overhead_per_job) if cfg.clock_mode == "virtual" else 0
    row[_ALLOC] = to_ns(profile.alloc) if not reuse else 0
    cin, cout = to_ns(profile.copy_in), to_ns(profile.copy_out)
    if not cfg.features.pinned_host:
        cin = with_penalty_ns(cin, cfg.bus.pageable_penalty)
        cout = with_penalty_ns(cout, cfg.bus.pageable_penalty)
    row[_COPY_IN] = cin
    row[_KERNEL] = to_ns(profile.kernel)
    row[_COPY_OUT] = cout
    row[_POST] = to_ns(profile.post)
    return row


def pool_init_ns(cfg: FrameworkConfig) -> int:
    cfg = validate_config(cfg)
    if not cfg.features.buffer_reuse:
        return 0
    devs = cfg.active_devices
    nbytes = cfg.max_input_size + cfg.max_output_size
    return sum(to_ns(devs[i % len(devs)].alloc_duration(nbytes)) for i in range(cfg.pool_size))


def simulate_costs(costs: np.ndarray, cfg: FrameworkConfig, *, accelerated: Optional[bool] = None) -> Timeline:
    """Run the oracle for jobs with explicit (n, 6) nanosecond stage costs."""
    cfg = validate_config(cfg)
    costs = np.ascontiguousarray(costs, dtype=np.int64)
    if costs.ndim != 2 or costs.shape[1] != 6:
        raise ValueError("costs must have shape (n_jobs, 6)")
    n = costs.shape[0]
    if n == 0:
        return Timeline((), 0, pool_init_ns(cfg))
    devs = cfg.active_devices
    engines = np.array([d.copy_engines for d in devs], np.int64)
    kernel = _simulate if (accelerated is None or accelerated) else _accel.python_impl(_simulate)
    if accelerated and not _accel.USE_NUMBA:
        raise RuntimeError("numba acceleration requested but disabled")
    device, submit, start, end = kernel(
        costs,
        len(devs),
        cfg.effective_depth,
        cfg.pool_size,
        cfg.features.buffer_reuse,
        engines,
        cfg.bus.channels,
        cfg.post_workers,
    )
    return build_timeline(np.arange(n), device, submit, start, end, pool_init_ns(cfg))


def des_simulate(profile: StageProfile, n_jobs: int, cfg: FrameworkConfig, *, accelerated: Optional[bool] = None) -> Timeline:
    """Oracle timeline for a closed-loop stream of ``n_jobs`` identical jobs."""
    if n_jobs < 1:
        raise ValueError("n_jobs must be >= 1")
    row = stage_costs_ns(profile, cfg)
    return simulate_costs(np.tile(row, (n_jobs, 1)), cfg, accelerated=accelerated)


def steady_state_period(profile: StageProfile, cfg: FrameworkConfig) -> float:
    """Asymptotic seconds per job, set by the most loaded resource.

    With overlap on this is the maximum of bus time over channels, copy-engine
    and kernel time over devices, post time over post workers and the serial
    host overhead. With buffer reuse off, per-job allocation holds a slot, so
    the slot residence over ``depth * devices`` is a further bound. With
    overlap off each device runs one job at a time.
    """
    cfg = validate_config(cfg)
    c = stage_costs_ns(profile, cfg) / 1e9
    n_dev = len(cfg.active_devices)
    bus = c[_COPY_IN] + c[_COPY_OUT]
    engines = min(d.copy_engines for d in cfg.active_devices)
    per_engine = bus if engines == 1 else max(c[_COPY_IN], c[_COPY_OUT])
    residence = c[_OVERHEAD] + c[_ALLOC] + c[_COPY_IN] + c[_KERNEL] + c[_COPY_OUT]
    terms = [bus / cfg.bus.channels, per_engine / n_dev, c[_POST] / cfg.post_workers, c[_OVERHEAD]]
    if cfg.features.overlap:
        terms.append(c[_KERNEL] / n_dev)
        if not cfg.features.buffer_reuse:
            terms.append(residence / (cfg.pipeline_depth * n_dev))
    else:
        terms.append(residence / n_dev)
    return float(max(terms))


def predicted_speedup(profile: StageProfile, cfg_enabled: FrameworkConfig, cfg_baseline: FrameworkConfig, n_jobs: int) -> float:
    base = des_simulate(profile, n_jobs, cfg_baseline).makespan_ns
    fast = des_simulate(profile, n_jobs, cfg_enabled).makespan_ns
    return base / fast
