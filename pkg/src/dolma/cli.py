"""Command line: ``dolma bench|microbench|memnode|checkpoint`` and the standalone ``memnode``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError, DolmaError

log = logging.getLogger("dolma")

# bench settings and their defaults; config file keys use the same names
BENCH_DEFAULTS = {
    "spec": "cg",
    "fraction": "0.5",
    "threads": 1,
    "cluster_size": 4,
    "dual_buffer": "on",
    "async_write": "on",
    "backend": "sim",
    "memnode": None,
    "profile": None,
    "access_profile": None,
    "seed": None,
    "out": "-",
    "format": "csv",
    "verify": False,
}


def _on_off(value, name: str) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"--{name.replace('_', '-')} expects on|off, got {value!r}")


def _fractions(value) -> list[float]:
    from .bench import FRACTIONS
    if isinstance(value, (int, float)):
        return [float(value)]
    if isinstance(value, list):
        return [float(v) for v in value]
    if str(value).lower() == "all":
        return list(FRACTIONS)
    try:
        return [float(v) for v in str(value).split(",")]
    except ValueError:
        raise ConfigError(f"bad --fraction {value!r}; use a number, a comma list or 'all'") from None


def _merge(args: argparse.Namespace) -> dict:
    """Flags override the JSON config file, which overrides the defaults."""
    conf = {}
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        conf = {k.replace("-", "_"): v for k, v in conf.items()}
        unknown = set(conf) - set(BENCH_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for key, default in BENCH_DEFAULTS.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag not in (None, False) else conf.get(key, default)
    return out


def _model(profile: Optional[str]):
    from .fabric import LatencyModel
    return LatencyModel.load(profile) if profile else LatencyModel.default()


def cmd_bench(args: argparse.Namespace) -> int:
    from .bench import emit_report, load_spec, run_oracle, run_workload
    from .fabric import TcpFabric
    from .placement import load_profile

    c = _merge(args)
    spec = load_spec(c["spec"])
    if c["seed"] is not None:
        spec = replace(spec, seed=int(c["seed"]))
    threads = int(c["threads"])
    model = _model(c["profile"])
    access = load_profile(c["access_profile"]) if c["access_profile"] else None
    fabric = None
    if c["backend"] == "tcp":
        if not c["memnode"]:
            raise ConfigError("--backend tcp needs --memnode HOST:PORT")
        fabric = TcpFabric(c["memnode"])
    elif c["backend"] != "sim":
        raise ConfigError(f"unknown backend {c['backend']!r}; choose sim or tcp")
    try:
        oracle = run_oracle(spec, threads, model)
        reports = [run_workload(spec, f, dual_buffer=_on_off(c["dual_buffer"], "dual_buffer"),
                                async_write=_on_off(c["async_write"], "async_write"), threads=threads,
                                cluster_size=int(c["cluster_size"]), model=model, fabric=fabric,
                                oracle=oracle, verify=bool(c["verify"]), access_profile=access)
                   for f in _fractions(c["fraction"])]
    finally:
        if fabric is not None:
            fabric.close()
    text = emit_report(reports, c["format"], None if c["out"] == "-" else c["out"])
    if c["out"] == "-":
        sys.stdout.write(text)
    return 0


def cmd_microbench(args: argparse.Namespace) -> int:
    from .bench import emit_microbench, run_microbench
    text = emit_microbench(run_microbench(_model(args.profile)), args.format,
                           None if args.out == "-" else args.out)
    if args.out == "-":
        sys.stdout.write(text)
    return 0


def cmd_memnode(args: argparse.Namespace) -> int:
    from .memnode import serve
    try:
        serve(args.bind, args.capacity_bytes, args.snapshot_dir, args.restore)
    except KeyboardInterrupt:
        pass
    return 0


def cmd_checkpoint(args: argparse.Namespace) -> int:
    from .checkpoint import materialize, read_checkpoint
    if args.materialize:
        ck = materialize(args.path, args.materialize)
        print(f"wrote {args.materialize}: epoch {ck.epoch}, {len(ck.remote)} remote objects")
        return 0
    ck = read_checkpoint(args.path)
    print(json.dumps({"epoch": ck.epoch, "timestamp": ck.timestamp, "objects": len(ck.metadata.get("objects", [])),
                      "remote_blobs": len(ck.remote), "local_blobs": len(ck.local)}, indent=2))
    return 0


def _add_memnode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bind", default="127.0.0.1:7070", help="HOST:PORT to listen on")
    p.add_argument("--capacity-bytes", type=int, default=256 << 20, help="size of the exported region")
    p.add_argument("--snapshot-dir", default=None, help="directory that SNAPSHOT requests write into")
    p.add_argument("--restore", default=None, help="snapshot file to start from")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dolma", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run a workload against the all-local oracle")
    b.add_argument("--config", help="JSON file whose keys mirror the flags")
    b.add_argument("--spec", help="preset name or workload JSON file")
    b.add_argument("--fraction", help="local memory fraction, a comma list, or 'all'")
    b.add_argument("--threads", type=int)
    b.add_argument("--cluster-size", type=int)
    b.add_argument("--dual-buffer", choices=("on", "off"))
    b.add_argument("--async-write", choices=("on", "off"))
    b.add_argument("--backend", choices=("sim", "tcp"))
    b.add_argument("--memnode", help="HOST:PORT of the memory node for --backend tcp")
    b.add_argument("--profile", help="latency calibration profile (JSON)")
    b.add_argument("--access-profile", help="expected per-tag access counts (JSON) for placement")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="output path, '-' for stdout")
    b.add_argument("--format", choices=("csv", "json"))
    b.add_argument("--verify", action="store_true", help="check object contents against a shadow copy")
    b.set_defaults(fn=cmd_bench)

    m = sub.add_parser("microbench", help="local vs remote latency table")
    m.add_argument("--profile", help="latency calibration profile (JSON)")
    m.add_argument("--out", default="-")
    m.add_argument("--format", choices=("csv", "json"), default="csv")
    m.set_defaults(fn=cmd_microbench)

    n = sub.add_parser("memnode", help="serve a memory region over TCP")
    _add_memnode_flags(n)
    n.set_defaults(fn=cmd_memnode)

    k = sub.add_parser("checkpoint", help="inspect or flatten a checkpoint file")
    k.add_argument("path")
    k.add_argument("--materialize", metavar="OUT", help="write a self-contained copy to OUT")
    k.set_defaults(fn=cmd_checkpoint)
    return ap


def _run(args: argparse.Namespace) -> int:
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except (DolmaError, OSError) as exc:
        log.error("%s", exc)
        return 1


def main(argv=None) -> int:
    return _run(build_parser().parse_args(argv))


def memnode_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="memnode", description="Serve a memory region over TCP.")
    ap.add_argument("-v", "--verbose", action="store_true")
    _add_memnode_flags(ap)
    args = ap.parse_args(argv)
    args.fn = cmd_memnode
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
