"""Command line front end for the experiment harness."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import Optional

from . import bench
from .core import BusSpec, ClockMode, DeviceSpec, FeatureToggles, FrameworkConfig, KiB, MiB, OffloadError
from .model import des_simulate
from .workloads import load_profile

# option name -> default; None means "not given"
DEFAULTS = {
    "devices": 1,
    "channels": 1,
    "copy_engines": 1,
    "reuse": True,
    "overlap": True,
    "pinned": True,
    "profile": None,
    "stream": "10",
    "reps": bench.MIN_WALL_REPS,
    "clock": "virtual",
    "out": None,
    "seed": 0,
    "depth": 3,
    "pool_size": None,
    "post_workers": None,
    "overhead_us": 70.0,
    "sizes": None,
}


class JsonErrorParser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    sys.exit(code)


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on|off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="JSON file with option values; explicit flags win")
    g.add_argument("--devices", type=int)
    g.add_argument("--channels", type=int, help="bus channels shared by all devices")
    g.add_argument("--copy-engines", dest="copy_engines", type=int, choices=(1, 2))
    g.add_argument("--reuse", type=_on_off, metavar="on|off")
    g.add_argument("--overlap", type=_on_off, metavar="on|off")
    g.add_argument("--pinned", type=_on_off, metavar="on|off", help="pinned host buffers")
    g.add_argument("--profile", help="small, large, balanced, transfer or a profile file")
    g.add_argument("--stream", help="stream length (comma list for sweep-stream)")
    g.add_argument("--reps", type=int, help=f"repetitions in wall mode (min {bench.MIN_WALL_REPS})")
    g.add_argument("--clock", choices=[m.value for m in ClockMode])
    g.add_argument("--out", help="write CSV here instead of stdout")
    g.add_argument("--seed", type=int)
    g.add_argument("--depth", type=int, help="pipeline depth per device")
    g.add_argument("--pool-size", dest="pool_size", type=int)
    g.add_argument("--post-workers", dest="post_workers", type=int)
    g.add_argument("--overhead-us", dest="overhead_us", type=float, help="modeled per-job framework cost")
    g.add_argument("--sizes", help="comma list of byte sizes for the overhead experiment")

    p = JsonErrorParser(prog="offloadkit", description="Offload pipeline experiments on a simulated accelerator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=JsonErrorParser)
    sub.add_parser("overhead", parents=[common], help="per-job framework overhead vs data size")
    sp = sub.add_parser("sweep-size", parents=[common], help="feature-ladder speedups per profile")
    sp.add_argument("--cpu-baseline", action="store_true", help="add a host-only SHA-1 row (machine specific)")
    sub.add_parser("sweep-stream", parents=[common], help="feature-ladder speedups vs stream length")
    sub.add_parser("oracle", parents=[common], help="print the predicted timeline as CSV")
    sub.add_parser("demo", parents=[common], help="hash random blocks end to end and verify digests")
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, value in loaded.items():
            if key in ("reuse", "overlap", "pinned") and isinstance(value, str):
                value = _on_off(value)
            if key == "stream" and not isinstance(value, str):
                value = ",".join(str(v) for v in value) if isinstance(value, list) else str(value)
            opts[key] = value
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _ints(text) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def config_from_options(opts: dict, max_input: int = MiB, max_output: int = 20) -> FrameworkConfig:
    devices = tuple(DeviceSpec(i, copy_engines=opts["copy_engines"]) for i in range(opts["devices"]))
    return FrameworkConfig(
        max_input_size=max_input,
        max_output_size=max_output,
        pool_size=opts["pool_size"],
        devices=devices,
        bus=BusSpec(channels=opts["channels"]),
        features=FeatureToggles(buffer_reuse=opts["reuse"], overlap=opts["overlap"], pinned_host=opts["pinned"]),
        pipeline_depth=opts["depth"],
        clock_mode=ClockMode(opts["clock"]),
        framework_overhead_per_job=opts["overhead_us"] * 1e-6,
        post_workers=opts["post_workers"],
    )


def _write(results, out: Optional[str]) -> None:
    if out:
        bench.emit_csv(results, out)
        return
    bench.emit_csv(results, "/dev/stdout")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        cfg = config_from_options(opts)
        cmd = args.command
        if cmd == "overhead":
            sizes = _ints(opts["sizes"]) if opts["sizes"] else list(bench.OVERHEAD_SIZES)
            results = bench.run_overhead(cfg, sizes, reps=opts["reps"])
            _write(results, opts["out"])
            for r in results:
                print(
                    f"# {r.block_size_bytes:>8} B  overhead {r.extras['overhead_us']:.3f} us "
                    f"({100 * r.extras['overhead_fraction']:.1f}% of {r.makespan_us_mean:.3f} us)",
                    file=sys.stderr,
                )
        elif cmd == "sweep-size":
            profiles = [load_profile(opts["profile"])] if opts["profile"] else ["small", "large"]
            n = _ints(opts["stream"])[0]
            results = bench.run_speedup_sweep(cfg, profiles, n, reps=opts["reps"])
            if args.cpu_baseline:
                for prof in {bench._resolve(p).block_size or 64 * KiB for p in profiles}:
                    results.append(bench.run_cpu_baseline(prof, n, reps=opts["reps"], seed=opts["seed"]))
            _write(results, opts["out"])
        elif cmd == "sweep-stream":
            prof = load_profile(opts["profile"] or "large")
            lens = _ints(opts["stream"]) if args.stream or args.config else list(bench.DEFAULT_STREAMS)
            results = bench.run_stream_sweep(cfg, prof, lens, reps=opts["reps"])
            _write(results, opts["out"])
        elif cmd == "oracle":
            prof = load_profile(opts["profile"] or "small")
            tl = des_simulate(prof, _ints(opts["stream"])[0], cfg)
            text = tl.to_csv(opts["out"])
            if not opts["out"]:
                sys.stdout.write(text)
            print(f"# makespan {tl.makespan_ns / 1e3:.3f} us, {tl.throughput:.3f} jobs/s", file=sys.stderr)
        elif cmd == "demo":
            n = _ints(opts["stream"])[0]
            summary = bench.run_demo(replace(cfg, max_output_size=20), n, seed=opts["seed"])
            print(json.dumps(summary))
            if summary["mismatches"]:
                _fail("DigestMismatch", f"{len(summary['mismatches'])} digests differ from the reference")
    except (OffloadError, ValueError, OSError, LookupError) as exc:
        _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
