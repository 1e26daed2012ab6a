"""Experiment harness: overhead, feature-ladder speedups and stream sweeps.

Every experiment drives a closed-loop stream: the application grabs every
free shell, submits it, and each completion callback hands the shell back so
the next job can go out. Virtual-clock runs are deterministic and use a
single repetition; wall-clock runs repeat at least ``MIN_WALL_REPS`` times and
report a Student-t 95% interval.
"""
from __future__ import annotations

import csv
import gc
import hashlib
import logging
import math
import random
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .core import ClockMode, ConfigError, FrameworkConfig, Job, StageProfile, validate_config
from .device import SimulatedBackend
from .model import Timeline, des_simulate
from .scheduler import Framework
from .workloads import DUMMY, SHA1, KernelSpec, builtin_profile, model_profile, sha1_digest

log = logging.getLogger(__name__)

MIN_WALL_REPS = 30
WALL_TOLERANCE = 0.15
LADDER = ("baseline", "reuse", "overlap", "dual")
DEFAULT_STREAMS = (1, 2, 3, 5, 10, 20, 50, 100)
OVERHEAD_SIZES = (1024, 4096, 16384, 65536, 262144, 1048576)

CSV_COLUMNS = (
    "experiment",
    "clock_mode",
    "devices",
    "channels",
    "reuse",
    "overlap",
    "profile",
    "block_size_bytes",
    "stream_len",
    "reps",
    "makespan_us_mean",
    "makespan_us_ci95",
    "throughput_jobs_s",
    "speedup_vs_baseline",
    "oracle_makespan_us",
    "deviation_pct",
)


@dataclass
class ExperimentResult:
    experiment: str
    clock_mode: str
    devices: int
    channels: int
    reuse: bool
    overlap: bool
    profile: str
    block_size_bytes: int
    stream_len: int
    reps: int
    makespan_us_mean: float
    makespan_us_ci95: float
    throughput_jobs_s: float
    speedup_vs_baseline: float
    oracle_makespan_us: float
    deviation_pct: float
    extras: dict = field(default_factory=dict, compare=False)

    def row(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if isinstance(v, bool):
                out.append("on" if v else "off")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


_TYPES = {f.name: f.type for f in fields(ExperimentResult)}


def _parse(name: str, text: str):
    kind = _TYPES[name]
    if kind == "bool":
        if text not in ("on", "off"):
            raise ValueError(f"{name}: expected on/off, got {text!r}")
        return text == "on"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def emit_csv(results: Iterable[ExperimentResult], path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in results:
                w.writerow(r.row())
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from exc


def read_csv(path: Union[str, Path]) -> list[ExperimentResult]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected header in {path}: {header}")
        return [ExperimentResult(**{k: _parse(k, v) for k, v in zip(CSV_COLUMNS, row)}) for row in reader]


def ci95(samples: Sequence[float]) -> float:
    """Half-width of the Student-t 95% confidence interval of the mean."""
    n = len(samples)
    if n < 2:
        return 0.0
    sd = float(np.std(samples, ddof=1))
    return float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n))


# --------------------------------------------------------------------------- configs


def ladder_configs(cfg: FrameworkConfig) -> dict[str, FrameworkConfig]:
    """Cumulative feature ladder starting from the blocking baseline.

    The baseline allocates per job, copies from pageable memory, runs one job
    at a time and uses one device. ``reuse`` switches to the pinned pooled
    shells, ``overlap`` pipelines, ``dual`` adds a second device (or all
    configured devices when more than two exist).
    """
    devices = tuple(cfg.devices)
    if len(devices) < 2:
        first = devices[0]
        devices = (first, replace(first, id=first.id + 1))
    multi = replace(cfg, devices=devices)
    base = multi.with_features(buffer_reuse=False, overlap=False, pinned_host=False, device_count_limit=1)
    reuse = base.with_features(buffer_reuse=True, pinned_host=True)
    overlap = reuse.with_features(overlap=True)
    dual = overlap.with_features(device_count_limit=None)
    return {"baseline": base, "reuse": reuse, "overlap": overlap, "dual": dual}


def _describe(cfg: FrameworkConfig) -> dict:
    v = validate_config(cfg)
    return dict(
        clock_mode=v.clock_mode.value,
        devices=len(v.active_devices),
        channels=v.bus.channels,
        reuse=v.features.buffer_reuse,
        overlap=v.features.overlap,
    )


# --------------------------------------------------------------------------- drivers


def run_stream(
    cfg: FrameworkConfig,
    n_jobs: int,
    *,
    profile: Optional[StageProfile] = None,
    kernel: KernelSpec = DUMMY,
    payloads: Optional[Sequence[bytes]] = None,
    input_size: int = 16,
    collect: Optional[dict] = None,
) -> Timeline:
    """Push ``n_jobs`` through a fresh framework, closed-loop; return its timeline.

    With ``payloads`` each job hashes/processes the given bytes; outputs are
    copied into ``collect[job_id]`` from the callback.
    """
    fw = Framework(cfg)

    def done(job):
        if collect is not None:
            collect[job.id] = (bytes(job.output), job.status)
        fw.job_put(job)

    for i in range(n_jobs):
        job = fw.job_get()
        if payloads is not None:
            job.set_input(payloads[i])
        else:
            job.input_size = min(input_size, job.max_input_size)
        job.output_size = min(kernel.output_size(job.input_size), job.max_output_size)
        job.kernel_func = kernel
        job.profile = profile
        job.callback_func = done
        fw.job_submit(job)
    fw.finalize()
    if fw.completed != n_jobs:
        raise RuntimeError(f"only {fw.completed} of {n_jobs} jobs completed")
    return fw.timeline()


def _repeat(cfg: FrameworkConfig, reps: int, fn) -> list[float]:
    virtual = validate_config(cfg).clock_mode is ClockMode.VIRTUAL
    if virtual:
        reps = 1
    elif reps < MIN_WALL_REPS:
        raise ConfigError(f"wall-clock experiments need at least {MIN_WALL_REPS} repetitions, got {reps}")
    if virtual:
        return [fn()]
    out = []
    # like timeit: a cycle collection in the middle of a few-ms run would
    # dominate it, so collect once up front and keep the collector off while
    # timing. Collecting before every rep leaves the caches cold instead.
    gc.collect()
    for _ in range(reps):
        gc.disable()
        try:
            out.append(fn())
        finally:
            gc.enable()
    return out


def measure(
    name: str,
    cfg: FrameworkConfig,
    profile: StageProfile,
    n_jobs: int,
    *,
    reps: int = MIN_WALL_REPS,
    baseline_us: Optional[float] = None,
) -> ExperimentResult:
    """Run one closed-loop stream configuration and compare it to the oracle."""
    samples = _repeat(cfg, reps, lambda: run_stream(cfg, n_jobs, profile=profile).makespan_ns / 1e3)
    mean = float(np.mean(samples))
    oracle_us = des_simulate(profile, n_jobs, cfg).makespan_ns / 1e3
    return ExperimentResult(
        experiment=name,
        profile=profile.name,
        block_size_bytes=profile.block_size or 0,
        stream_len=n_jobs,
        reps=len(samples),
        makespan_us_mean=mean,
        makespan_us_ci95=ci95(samples),
        throughput_jobs_s=n_jobs / (mean / 1e6) if mean > 0 else float("inf"),
        speedup_vs_baseline=(baseline_us / mean) if baseline_us else 1.0,
        oracle_makespan_us=oracle_us,
        deviation_pct=abs(mean - oracle_us) / oracle_us * 100 if oracle_us else 0.0,
        extras={"samples_us": samples},
        **_describe(cfg),
    )


def _resolve(profile) -> StageProfile:
    return builtin_profile(profile) if isinstance(profile, str) else profile


def run_ladder(cfg: FrameworkConfig, profile, n_jobs: int, *, reps: int = MIN_WALL_REPS, steps=LADDER, experiment="sweep") -> list[ExperimentResult]:
    profile = _resolve(profile)
    configs = ladder_configs(cfg)
    base = measure(f"{experiment}:baseline", configs["baseline"], profile, n_jobs, reps=reps)
    results = [base]
    for step in steps:
        if step == "baseline":
            continue
        results.append(
            measure(f"{experiment}:{step}", configs[step], profile, n_jobs, reps=reps, baseline_us=base.makespan_us_mean)
        )
    return results


def run_speedup_sweep(cfg: FrameworkConfig, profiles=("small", "large"), stream_len: int = 10, *, reps: int = MIN_WALL_REPS, steps=LADDER) -> list[ExperimentResult]:
    """Speedup of each cumulative feature step over the baseline, per profile."""
    out = []
    for p in profiles:
        out.extend(run_ladder(cfg, p, stream_len, reps=reps, steps=steps, experiment="sweep-size"))
    return out


def run_stream_sweep(cfg: FrameworkConfig, profile="large", stream_lens=DEFAULT_STREAMS, *, reps: int = MIN_WALL_REPS, steps=LADDER) -> list[ExperimentResult]:
    """Speedup of each feature step over the baseline, per stream length."""
    out = []
    for n in stream_lens:
        out.extend(run_ladder(cfg, profile, n, reps=reps, steps=steps, experiment="sweep-stream"))
    return out


def speedups(results: Iterable[ExperimentResult]) -> dict:
    """{(profile, stream_len, step): speedup} for ladder results."""
    return {(r.profile, r.stream_len, r.experiment.split(":")[-1]): r.speedup_vs_baseline for r in results}


# --------------------------------------------------------------------------- overhead


def _direct_job_ns(backend: SimulatedBackend, job) -> int:
    """Copy-in, kernel, copy-out straight on the backend, no framework."""
    dev = backend.devices[0]
    t = backend.clock.now()
    for issue in (dev.copy_in_async, dev.launch_kernel_async, dev.copy_out_async):
        backend.wait(issue(job))
    return backend.clock.now() - t


def run_overhead(cfg: FrameworkConfig, sizes: Sequence[int] = OVERHEAD_SIZES, *, reps: int = MIN_WALL_REPS) -> list[ExperimentResult]:
    """Per-job time spent in the framework layer for a dummy kernel.

    Framework time runs from submission to the synchronous wait returning;
    the direct path issues the same three stages on a bare backend. Sizes are
    interleaved within each repetition and every framework sample is paired
    with a direct one, so drift on a busy machine hits all sizes alike.
    """
    top = max(sizes)
    cfg = validate_config(replace(cfg, max_input_size=top, max_output_size=top).with_features(buffer_reuse=True, pinned_host=True))
    virtual = cfg.clock_mode is ClockMode.VIRTUAL
    fw = Framework(cfg)
    direct = SimulatedBackend(cfg)
    probe = Job(0, top, top)
    probe.d_input = direct.devices[0].allocate(top)
    probe.d_output = direct.devices[0].allocate(top)
    probe.kernel_func = DUMMY

    def framework_ns(size):
        job = fw.job_get()
        job.input_size = job.output_size = size
        job.kernel_func = DUMMY
        t = fw.clock.now()
        fw.job_submit(job)
        fw.job_synch(job)
        if virtual:
            rec = fw.timeline().records[-1]
            dt = rec.end_ns - rec.submit_ns
        else:
            dt = fw.clock.now() - t
        fw.job_put(job)
        return dt

    def direct_ns(size):
        probe.input_size = probe.output_size = size
        return _direct_job_ns(direct, probe)

    shuffler = random.Random(0)

    def one_round():
        # a big copy evicts the caches, so the size that always ran right after
        # it would look slower; shuffle so every size takes that hit equally
        order = list(range(len(sizes)))
        shuffler.shuffle(order)
        out = [None] * len(sizes)
        for i in order:
            out[i] = (framework_ns(sizes[i]), direct_ns(sizes[i]))
        return out

    try:
        if not virtual:
            # touch every shell's buffers once so page faults stay out of the samples
            for _ in range(cfg.pool_size + 1):
                one_round()
        rounds = _repeat(cfg, reps, one_round)
    finally:
        fw.finalize()
        direct.shutdown()

    results = []
    for k, size in enumerate(sizes):
        fw_us = np.array([r[k][0] for r in rounds]) / 1e3
        direct_us = np.array([r[k][1] for r in rounds]) / 1e3
        overhead = fw_us - direct_us
        mean = float(fw_us.mean())
        prof = model_profile(cfg.bus, cfg.active_devices[0], DUMMY, size)
        oracle_us = des_simulate(prof, 1, cfg).makespan_ns / 1e3
        results.append(
            ExperimentResult(
                experiment="overhead",
                profile="dummy",
                block_size_bytes=int(size),
                stream_len=1,
                reps=len(rounds),
                makespan_us_mean=mean,
                makespan_us_ci95=ci95(fw_us),
                throughput_jobs_s=1e6 / mean if mean > 0 else float("inf"),
                speedup_vs_baseline=1.0,
                oracle_makespan_us=oracle_us,
                deviation_pct=abs(mean - oracle_us) / oracle_us * 100 if oracle_us else 0.0,
                extras={
                    "overhead_us": float(overhead.mean()),
                    "overhead_ci95": ci95(overhead),
                    "overhead_us_median": float(np.median(overhead)),
                    "direct_us": float(direct_us.mean()),
                    "overhead_fraction": float(overhead.mean() / mean) if mean > 0 else 0.0,
                },
                **_describe(cfg),
            )
        )
    return results


# --------------------------------------------------------------------------- host-only baseline and demo


def run_cpu_baseline(block_size: int, stream_len: int = 10, *, reps: int = MIN_WALL_REPS, seed: int = 0) -> ExperimentResult:
    """SHA-1 of the stream on one host core; machine-specific by nature."""
    rng = np.random.default_rng(seed)
    blocks = [rng.integers(0, 256, block_size, dtype=np.uint8) for _ in range(stream_len)]
    sha1_digest(blocks[0][:64])  # compile outside the timed region
    samples = []
    for _ in range(max(reps, MIN_WALL_REPS)):
        t = time.perf_counter_ns()
        for b in blocks:
            sha1_digest(b)
        samples.append((time.perf_counter_ns() - t) / 1e3)
    mean = float(np.mean(samples))
    return ExperimentResult(
        experiment="cpu-sha1",
        clock_mode="wall",
        devices=0,
        channels=0,
        reuse=False,
        overlap=False,
        profile="host",
        block_size_bytes=block_size,
        stream_len=stream_len,
        reps=len(samples),
        makespan_us_mean=mean,
        makespan_us_ci95=ci95(samples),
        throughput_jobs_s=stream_len / (mean / 1e6),
        speedup_vs_baseline=1.0,
        oracle_makespan_us=float("nan"),
        deviation_pct=float("nan"),
    )


def run_demo(cfg: FrameworkConfig, n_jobs: int = 32, *, block_size: int = 64 * 1024, seed: int = 0) -> dict:
    """Hash random blocks through the framework and check every digest."""
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, block_size + 1, n_jobs)
    payloads = [rng.integers(0, 256, int(s), dtype=np.uint8).tobytes() for s in sizes]
    cfg = replace(cfg, max_input_size=block_size, max_output_size=max(cfg.max_output_size, 20))
    got: dict = {}
    tl = run_stream(cfg, n_jobs, kernel=SHA1, payloads=payloads, collect=got)
    mismatches = [i for i, p in enumerate(payloads) if got[i][0] != hashlib.sha1(p).digest()]
    return {
        "jobs": n_jobs,
        "verified": n_jobs - len(mismatches),
        "mismatches": mismatches,
        "makespan_us": tl.makespan_ns / 1e3,
        "throughput_jobs_s": tl.throughput,
        "devices": sorted({r.device_id for r in tl.records}),
    }
