from __future__ import annotations

import hashlib
import time

import pytest

from offloadkit.bufferpool import BufferPool
from offloadkit.core import (
    BusSpec,
    ClockMode,
    DeviceSpec,
    FrameworkConfig,
    GiB,
    KernelFault,
    KiB,
    MiB,
    Stage,
    ZeroDevices,
    to_ns,
)
from offloadkit.device import EventStatus, SimulatedBackend, VirtualClock, enumerate_devices, event_poll, transfer_time
from offloadkit.workloads import SHA1, KernelSpec

from conftest import make_cfg


def test_transfer_time_formula():
    bus = BusSpec(bandwidth=1 * GiB, latency=10e-6)
    # 10 us + 1 MiB / (1 GiB/s) = 10 us + 976.5625 us
    assert transfer_time(bus, MiB) == pytest.approx(986.5625e-6, abs=1e-12)
    bus3 = BusSpec(bandwidth=3 * GiB, latency=10e-6)
    assert transfer_time(bus3, 96 * KiB) == pytest.approx(40.517578125e-6, abs=1e-12)
    assert transfer_time(bus, 0) == 0.0


def test_enumerate_devices_honors_limit():
    cfg = FrameworkConfig(MiB, 20, devices=(DeviceSpec(0), DeviceSpec(1)))
    assert len(enumerate_devices(cfg)) == 2
    assert [d.id for d in enumerate_devices(cfg.with_features(device_count_limit=1))] == [0]
    with pytest.raises(ZeroDevices):
        enumerate_devices(FrameworkConfig(MiB, 20, devices=()))


def _job(backend, size=64 * KiB, kernel=SHA1, out=20):
    pool = BufferPool(backend.cfg, backend.devices)
    job = pool.acquire()
    job.input_size = size
    job.output_size = out
    job.kernel_func = kernel
    return job


def test_copies_on_one_channel_serialize():
    cfg = make_cfg(2, bus=BusSpec(channels=1, bandwidth=1 * GiB, latency=0))
    b = SimulatedBackend(cfg)
    pool = BufferPool(b.cfg, b.devices)
    j0, j1 = pool.acquire(), pool.acquire()
    for j in (j0, j1):
        j.input_size, j.output_size, j.kernel_func = MiB, 20, SHA1
    e0 = b.devices[0].copy_in_async(j0)
    e1 = b.devices[1].copy_in_async(j1)
    d = to_ns(MiB / GiB)
    assert (e0.start, e0.end) == (0, d)
    assert (e1.start, e1.end) == (d, 2 * d)


def test_two_channels_run_in_parallel():
    cfg = make_cfg(2, bus=BusSpec(channels=2, latency=0))
    b = SimulatedBackend(cfg)
    pool = BufferPool(b.cfg, b.devices)
    j0, j1 = pool.acquire(), pool.acquire()
    for j in (j0, j1):
        j.input_size, j.output_size, j.kernel_func = MiB, 20, SHA1
    e0 = b.devices[0].copy_in_async(j0)
    e1 = b.devices[1].copy_in_async(j1)
    assert e0.start == e1.start == 0


@pytest.mark.parametrize("engines, overlapped", [(1, False), (2, True)])
def test_copy_engines(engines, overlapped):
    cfg = FrameworkConfig(MiB, MiB, devices=(DeviceSpec(0, copy_engines=engines),), bus=BusSpec(channels=2), post_workers=1)
    b = SimulatedBackend(cfg)
    pool = BufferPool(b.cfg, b.devices)
    j0, j1 = pool.acquire(), pool.acquire()
    for j in (j0, j1):
        j.input_size, j.output_size, j.kernel_func = MiB, MiB, SHA1
    cin = b.devices[0].copy_in_async(j0)
    cout = b.devices[0].copy_out_async(j1)
    assert (cout.start < cin.end) is overlapped


def test_poll_pending_then_complete():
    b = SimulatedBackend(make_cfg(1))
    job = _job(b)
    evt = b.devices[0].copy_in_async(job)
    assert event_poll(evt) is EventStatus.PENDING
    b.clock.advance_to(evt.end - 1)
    assert evt.poll() is EventStatus.PENDING
    b.clock.advance_to(evt.end)
    assert evt.poll() is EventStatus.COMPLETE
    b.clock.advance(10)
    assert evt.poll() is EventStatus.COMPLETE


def test_kernel_failure_reports_error():
    def boom(data):
        raise RuntimeError("bad block")

    b = SimulatedBackend(make_cfg(1))
    job = _job(b, kernel=KernelSpec("boom", boom))
    evt = b.devices[0].launch_kernel_async(job)
    assert b.wait(evt) is EventStatus.ERROR
    assert isinstance(evt.error, KernelFault)


def test_oversized_kernel_output_is_a_fault():
    b = SimulatedBackend(make_cfg(1, max_output_size=4))
    job = _job(b, out=4)
    evt = b.devices[0].launch_kernel_async(job)
    assert b.wait(evt) is EventStatus.ERROR


def test_sha1_stage_chain_produces_digest():
    b = SimulatedBackend(make_cfg(1))
    job = _job(b, size=3)
    job.set_input(b"abc")
    dev = b.devices[0]
    for issue in (dev.copy_in_async, dev.launch_kernel_async, dev.copy_out_async):
        assert b.wait(issue(job)) is EventStatus.COMPLETE
    assert bytes(job.output).hex() == "a9993e364706816aba3e25717850c26c9cd0d89d"
    assert bytes(job.output) == hashlib.sha1(b"abc").digest()


def test_kernel_engine_is_exclusive():
    b = SimulatedBackend(make_cfg(1))
    pool = BufferPool(b.cfg, b.devices)
    jobs = [pool.acquire() for _ in range(3)]
    for j in jobs:
        j.input_size, j.output_size, j.kernel_func = 64 * KiB, 20, SHA1
    evts = [b.devices[0].launch_kernel_async(j) for j in jobs]
    for a, c in zip(evts, evts[1:]):
        assert c.start >= a.end
    assert evts[0].end - evts[0].start == to_ns(0.5e-3)


def test_pageable_copies_pay_penalty():
    cfg = make_cfg(1, pinned=False, bus=BusSpec(latency=0, bandwidth=1 * GiB, pageable_penalty=0.4))
    b = SimulatedBackend(cfg)
    job = _job(b, size=MiB)
    evt = b.devices[0].copy_in_async(job)
    base = to_ns(MiB / GiB)
    assert evt.end - evt.start == base + round(base * 0.4)


def test_zero_byte_copy_out_costs_nothing():
    b = SimulatedBackend(make_cfg(1))
    job = _job(b, out=0)
    assert b.cost_ns(job, Stage.COPY_OUT) == 0


def test_reuse_off_alloc_and_out_of_memory():
    cfg = FrameworkConfig(
        MiB, 20, devices=(DeviceSpec(0, alloc_cost=2e-3, memory_capacity=MiB + 64),), post_workers=1
    ).with_features(buffer_reuse=False)
    b = SimulatedBackend(cfg)
    pool = BufferPool(b.cfg, b.devices)
    j0, j1 = pool.acquire(), pool.acquire()
    for j in (j0, j1):
        j.input_size, j.output_size, j.kernel_func = MiB, 20, SHA1
        j.device = 0
    e0 = b.devices[0].alloc_async(j0)
    assert e0.end - e0.start == to_ns(2e-3)
    assert b.wait(e0) is EventStatus.COMPLETE
    e1 = b.devices[0].alloc_async(j1)
    assert b.wait(e1) is EventStatus.ERROR
    pool.free_job_buffers(j0)
    assert b.devices[0].memory_used == 0


def test_virtual_clock_is_monotone():
    c = VirtualClock()
    c.advance_to(5)
    with pytest.raises(ValueError):
        c.advance_to(4)


def test_virtual_timings_are_repeatable():
    def run():
        b = SimulatedBackend(make_cfg(2))
        pool = BufferPool(b.cfg, b.devices)
        out = []
        for i in range(4):
            j = pool.acquire()
            j.input_size, j.output_size, j.kernel_func = 64 * KiB, 20, SHA1
            dev = b.devices[j.pinned_device]
            for issue in (dev.copy_in_async, dev.launch_kernel_async, dev.copy_out_async):
                e = issue(j)
                out.append((e.start, e.end))
        return out

    assert run() == run()


@pytest.mark.wall
def test_wall_mode_pads_but_never_truncates():
    def slow(data):
        time.sleep(0.02)

    cfg = make_cfg(1, clock_mode=ClockMode.WALL)
    b = SimulatedBackend(cfg)
    job = _job(b, kernel=KernelSpec("slow", slow, duration=lambda n: 1e-3))
    evt = b.devices[0].launch_kernel_async(job)
    assert b.wait(evt) is EventStatus.COMPLETE
    assert evt.end - evt.start >= 20_000_000

    fast = _job(b, kernel=KernelSpec("fast", lambda d: None, duration=lambda n: 5e-3))
    t0 = time.perf_counter()
    evt = b.devices[0].launch_kernel_async(fast)
    b.wait(evt)
    assert time.perf_counter() - t0 >= 4.5e-3
    b.shutdown()
