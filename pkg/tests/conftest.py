from __future__ import annotations

import warnings

import pytest

from offloadkit.core import DeviceSpec, FrameworkConfig, MiB, PoolTooSmall


def pytest_configure(config):
    config.addinivalue_line("markers", "wall: uses the wall clock (timing sensitive)")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.fixture(autouse=True)
def _quiet_pool_warnings():
    # undersized pools are legal; tests that care use pytest.warns
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PoolTooSmall)
        yield


def make_cfg(devices=1, *, reuse=True, overlap=True, pinned=True, post_workers=1, **kw) -> FrameworkConfig:
    """Small helper so tests don't depend on the host's core count."""
    cfg = FrameworkConfig(
        max_input_size=kw.pop("max_input_size", MiB),
        max_output_size=kw.pop("max_output_size", 20),
        devices=tuple(DeviceSpec(i) for i in range(devices)),
        post_workers=post_workers,
        **kw,
    )
    return cfg.with_features(buffer_reuse=reuse, overlap=overlap, pinned_host=pinned)


@pytest.fixture
def cfg1():
    return make_cfg(1)


@pytest.fixture
def cfg2():
    return make_cfg(2)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, failures: list[str], detail: str) -> None:
    ok = not failures
    text = detail if ok else "; ".join(failures)
    ACCEPTANCE[number] = (ok, text)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {text}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {text}")
