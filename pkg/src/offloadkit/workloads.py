"""Kernels and stage profiles for the SHA-1 hashing workload.

The default profiles are constrained only at their endpoints: allocation takes
85% of a small block's job time and 38% of a 1 MiB block's, and the hashing
kernel takes 0.5 ms on the smallest block and 10 ms on 1 MiB. The remaining
fraction split is a documented default, overridable with a profile file.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import _accel
from .core import BusSpec, DeviceSpec, KiB, MiB, StageProfile, UnknownProfile

SMALLEST_BLOCK = 64 * KiB
LARGEST_BLOCK = 1 * MiB
BLOCK_SIZES = (64 * KiB, 128 * KiB, 256 * KiB, 512 * KiB, 1 * MiB)

SHA1_KERNEL_MIN = 0.5e-3
SHA1_KERNEL_MAX = 10e-3

_H0 = np.array([0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476, 0xC3D2E1F0], dtype=np.int64)

# --------------------------------------------------------------------------- SHA-1


def _pad(data: np.ndarray) -> np.ndarray:
    """Message padding; returns big-endian 32-bit words as int64."""
    n = data.size
    total = ((n + 8) // 64 + 1) * 64
    buf = np.zeros(total, dtype=np.uint8)
    buf[:n] = data
    buf[n] = 0x80
    buf[-8:] = np.frombuffer((n * 8).to_bytes(8, "big"), dtype=np.uint8)
    return buf.view(">u4").astype(np.int64)


@_accel.jit(nogil=True)
def _sha1_words_jit(words, state):
    mask = 0xFFFFFFFF
    w = np.empty(80, np.int64)
    h0, h1, h2, h3, h4 = state[0], state[1], state[2], state[3], state[4]
    for blk in range(words.size // 16):
        base = blk * 16
        for t in range(16):
            w[t] = words[base + t]
        for t in range(16, 80):
            x = w[t - 3] ^ w[t - 8] ^ w[t - 14] ^ w[t - 16]
            w[t] = ((x << 1) | (x >> 31)) & mask
        a, b, c, d, e = h0, h1, h2, h3, h4
        for t in range(80):
            if t < 20:
                f = (b & c) | ((~b) & d)
                k = 0x5A827999
            elif t < 40:
                f = b ^ c ^ d
                k = 0x6ED9EBA1
            elif t < 60:
                f = (b & c) | (b & d) | (c & d)
                k = 0x8F1BBCDC
            else:
                f = b ^ c ^ d
                k = 0xCA62C1D6
            tmp = ((((a << 5) | (a >> 27)) & mask) + (f & mask) + e + k + w[t]) & mask
            e = d
            d = c
            c = ((b << 30) | (b >> 2)) & mask
            b = a
            a = tmp
        h0 = (h0 + a) & mask
        h1 = (h1 + b) & mask
        h2 = (h2 + c) & mask
        h3 = (h3 + d) & mask
        h4 = (h4 + e) & mask
    out = np.empty(5, np.int64)
    out[0], out[1], out[2], out[3], out[4] = h0, h1, h2, h3, h4
    return out


def _sha1_words_numpy(words, state):
    # message schedule for every block at once; rounds stay sequential
    blocks = words.reshape(-1, 16).astype(np.uint32)
    sched = np.empty((blocks.shape[0], 80), dtype=np.uint32)
    sched[:, :16] = blocks
    for t in range(16, 80):
        x = sched[:, t - 3] ^ sched[:, t - 8] ^ sched[:, t - 14] ^ sched[:, t - 16]
        sched[:, t] = (x << np.uint32(1)) | (x >> np.uint32(31))
    mask = 0xFFFFFFFF
    h0, h1, h2, h3, h4 = (int(v) for v in state)
    for w in sched.tolist():
        a, b, c, d, e = h0, h1, h2, h3, h4
        for t in range(80):
            if t < 20:
                f = (b & c) | (~b & d)
                k = 0x5A827999
            elif t < 40:
                f = b ^ c ^ d
                k = 0x6ED9EBA1
            elif t < 60:
                f = (b & c) | (b & d) | (c & d)
                k = 0x8F1BBCDC
            else:
                f = b ^ c ^ d
                k = 0xCA62C1D6
            a, b, c, d, e = (
                ((((a << 5) | (a >> 27)) & mask) + (f & mask) + e + k + w[t]) & mask,
                a,
                ((b << 30) | (b >> 2)) & mask,
                c,
                d,
            )
        h0 = (h0 + a) & mask
        h1 = (h1 + b) & mask
        h2 = (h2 + c) & mask
        h3 = (h3 + d) & mask
        h4 = (h4 + e) & mask
    return np.array([h0, h1, h2, h3, h4], dtype=np.int64)


def _as_bytes_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return np.ascontiguousarray(data).view(np.uint8).ravel()
    return np.frombuffer(bytes(data), dtype=np.uint8)


def sha1_digest(data, *, accelerated: Optional[bool] = None) -> bytes:
    """SHA-1 of ``data`` (bytes-like or uint8 array) as 20 raw bytes."""
    words = _pad(_as_bytes_array(data))
    use_jit = _accel.USE_NUMBA if accelerated is None else accelerated
    impl = _sha1_words_jit if use_jit else _sha1_words_numpy
    return impl(words, _H0.copy()).astype(">u4").tobytes()


# --------------------------------------------------------------------------- kernels


def sha1_kernel_duration(size: int) -> float:
    """Linear from 0.5 ms at the smallest block to 10 ms at 1 MiB, clamped below."""
    size = max(size, SMALLEST_BLOCK)
    slope = (SHA1_KERNEL_MAX - SHA1_KERNEL_MIN) / (LARGEST_BLOCK - SMALLEST_BLOCK)
    return SHA1_KERNEL_MIN + slope * (size - SMALLEST_BLOCK)


@dataclass(frozen=True)
class KernelSpec:
    """A named kernel: what it computes and how long it is modeled to take."""

    name: str
    func: Callable[[np.ndarray], object]
    duration: Callable[[int], float] = field(default=lambda size: 0.0)
    output_size: Callable[[int], int] = field(default=lambda size: size)
    post_duration: float = 0.0
    post_func: Optional[Callable] = None

    def __call__(self, data: np.ndarray):
        return self.func(data)


def _noop(data: np.ndarray) -> None:
    return None


# does no work: output buffers keep whatever they held
DUMMY = KernelSpec("dummy", _noop)
SHA1 = KernelSpec("sha1", sha1_digest, duration=sha1_kernel_duration, output_size=lambda size: 20)

KERNELS = {"dummy": DUMMY, "sha1": SHA1}


def get_kernel(name: str) -> KernelSpec:
    try:
        return KERNELS[name]
    except KeyError:
        raise LookupError(f"unknown kernel {name!r}; known: {sorted(KERNELS)}") from None


def kernel_duration(spec: KernelSpec, size: int) -> float:
    return spec.duration(size)


# --------------------------------------------------------------------------- profiles

SMALL_FRACTIONS = {"alloc": 0.85, "copy_in": 0.02, "kernel": 0.10, "copy_out": 0.01, "post": 0.02}
LARGE_FRACTIONS = {"alloc": 0.38, "copy_in": 0.22, "kernel": 0.30, "copy_out": 0.04, "post": 0.06}


def _from_kernel(kernel_time: float, fractions: dict, name: str, block: Optional[int]) -> StageProfile:
    return StageProfile.from_fractions(kernel_time / fractions["kernel"], fractions, name=name, block_size=block)


def builtin_profile(name: str) -> StageProfile:
    """Default profiles pinned to the published SHA-1 endpoints, plus two synthetic ones.

    ``small`` and ``large`` follow the SHA-1 endpoints; ``balanced`` has equal
    1 ms copy-in, kernel and copy-out; ``transfer`` is dominated by copies.
    """
    if name == "small":
        return _from_kernel(SHA1_KERNEL_MIN, SMALL_FRACTIONS, "small", SMALLEST_BLOCK)
    if name == "large":
        return _from_kernel(SHA1_KERNEL_MAX, LARGE_FRACTIONS, "large", LARGEST_BLOCK)
    if name == "balanced":
        return StageProfile(alloc=1e-3, copy_in=1e-3, kernel=1e-3, copy_out=1e-3, post=0.0, name="balanced", block_size=SMALLEST_BLOCK)
    if name == "transfer":
        return StageProfile(alloc=1e-3, copy_in=2e-3, kernel=0.5e-3, copy_out=1.5e-3, post=0.1e-3, name="transfer", block_size=SMALLEST_BLOCK)
    raise UnknownProfile(f"unknown profile {name!r}; known: small, large, balanced, transfer")


BUILTIN_PROFILES = ("small", "large", "balanced", "transfer")


def profile_for_size(size: int) -> StageProfile:
    """Interpolate between the small and large profiles on a log2 size axis."""
    if not SMALLEST_BLOCK <= size <= LARGEST_BLOCK:
        raise ValueError(f"size must lie in [{SMALLEST_BLOCK}, {LARGEST_BLOCK}]")
    if size == SMALLEST_BLOCK:
        return builtin_profile("small")
    if size == LARGEST_BLOCK:
        return builtin_profile("large")
    w = math.log2(size / SMALLEST_BLOCK) / math.log2(LARGEST_BLOCK / SMALLEST_BLOCK)
    fr = {k: (1 - w) * SMALL_FRACTIONS[k] + w * LARGE_FRACTIONS[k] for k in SMALL_FRACTIONS}
    fr["post"] = 1.0 - math.fsum(v for k, v in fr.items() if k != "post")
    return _from_kernel(sha1_kernel_duration(size), fr, f"sha1-{size // KiB}k", size)


def model_profile(bus: BusSpec, device: DeviceSpec, kernel: KernelSpec, input_size: int, output_size: Optional[int] = None) -> StageProfile:
    """Stage costs the simulated backend derives when a job carries no profile."""
    from .device import transfer_time

    if output_size is None:
        output_size = kernel.output_size(input_size)
    return StageProfile(
        alloc=device.alloc_duration(input_size + output_size),
        copy_in=transfer_time(bus, input_size),
        kernel=kernel.duration(input_size),
        copy_out=transfer_time(bus, output_size),
        post=kernel.post_duration,
        name=f"{kernel.name}-model",
        block_size=input_size,
    )


# --------------------------------------------------------------------------- profile files

_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}
_LINE = re.compile(r"^\s*([a-z_]+)\s*[=:]\s*([0-9.eE+-]+)\s*([a-z]*)\s*$")
_FILE_KEYS = {"alloc", "copy_in", "kernel", "copy_out", "post", "total", "block_size", "name"}

PROFILE_GRAMMAR = """\
One entry per line, '#' starts a comment:

    <key> = <number>[<unit>]

keys:  alloc copy_in kernel copy_out post   (stage costs)
       total                                 (job time, needed with fractions)
       block_size                            (bytes, informational)
units: s ms us ns. A stage value with a unit is a duration; without a unit it
is a fraction of 'total'. Either all five stages are durations, or all five
are fractions summing to 1 and 'total' is given.
"""


def parse_profile(text: str, name: str = "file") -> StageProfile:
    durations: dict[str, float] = {}
    fractions: dict[str, float] = {}
    total = None
    block = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("name"):
            name = line.split("=", 1)[1].strip() if "=" in line else name
            continue
        m = _LINE.match(line)
        if not m or m.group(1) not in _FILE_KEYS:
            raise ValueError(f"profile line {lineno}: cannot parse {raw!r}")
        key, num, unit = m.group(1), float(m.group(2)), m.group(3)
        if unit and unit not in _UNITS:
            raise ValueError(f"profile line {lineno}: unknown unit {unit!r}")
        if key == "block_size":
            block = int(num)
        elif key == "total":
            if not unit:
                raise ValueError(f"profile line {lineno}: total needs a unit")
            total = num * _UNITS[unit]
        elif unit:
            durations[key] = num * _UNITS[unit]
        else:
            fractions[key] = num
    if durations and fractions:
        raise ValueError("profile mixes durations and fractions")
    if durations:
        missing = {"alloc", "copy_in", "kernel", "copy_out", "post"} - set(durations)
        if missing:
            raise ValueError(f"profile is missing stages {sorted(missing)}")
        return StageProfile(**durations, name=name, block_size=block)
    if total is None:
        raise ValueError("fraction profiles need 'total = <duration>'")
    return StageProfile.from_fractions(total, fractions, name=name, block_size=block)


def load_profile(spec: Union[str, Path]) -> StageProfile:
    """A builtin profile name or a path to a profile file."""
    if isinstance(spec, str) and spec in BUILTIN_PROFILES:
        return builtin_profile(spec)
    path = Path(spec)
    if not path.exists():
        raise UnknownProfile(f"{spec!r} is neither a builtin profile nor an existing file")
    return parse_profile(path.read_text(), name=path.stem)


def format_profile(profile: StageProfile) -> str:
    lines = [f"name = {profile.name}"]
    if profile.block_size is not None:
        lines.append(f"block_size = {profile.block_size}")
    for stage in ("alloc", "copy_in", "kernel", "copy_out", "post"):
        lines.append(f"{stage} = {getattr(profile, stage)!r}s")
    return "\n".join(lines) + "\n"
