"""Console entry points: the gateway front end, the bench harness, and the
broker/worker daemon runner.

Gateway exit codes: 0 success, 1 transport failure, 2 task failure, 3 bad
arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import bench
from .gateway import (
    GatewayError,
    SessionConfig,
    execute_session,
    fetch_chain_status,
    render_chain_status,
    render_session_report,
)
from .model import ModelError, NodeRole

EXIT_OK = 0
EXIT_TRANSPORT = 1
EXIT_TASK = 2
EXIT_USAGE = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise _UsageError(message)


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


# --- gateway ---

def gateway_main(argv=None) -> int:
    parser = _Parser(prog="gateway", description="Oximeter gateway simulator")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sess = sub.add_parser("session", help="record a trace, submit it, and print the analysis")
    sess.add_argument("--master", required=True, metavar="H:P")
    sess.add_argument("--seconds", type=float, default=180.0)
    sess.add_argument("--hz", type=float, default=2.0)
    sess.add_argument("--profile", default="healthy",
                      choices=("healthy", "mild", "moderate", "severe", "scripted"))
    sess.add_argument("--seed", type=int, default=0)
    sess.add_argument("--script", default=None, metavar="FILE",
                      help="trace file to replay (implies --profile scripted)")
    sess.add_argument("--pad-bytes", type=int, default=18432)
    sess.add_argument("--session-id", default="")

    chain = sub.add_parser("chain-status", help="show per-worker ledger replica tips")
    chain.add_argument("--master", required=True, metavar="H:P")

    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args.verbose)

    try:
        if args.command == "session":
            profile = "scripted" if args.script else args.profile
            try:
                config = SessionConfig(
                    master_address=args.master,
                    record_seconds=args.seconds,
                    sensing_hz=args.hz,
                    profile=profile,
                    seed=args.seed,
                    script_path=args.script,
                    pad_to_bytes=args.pad_bytes,
                    session_id=args.session_id,
                )
            except ModelError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_USAGE
            report = execute_session(config)
            print(render_session_report(report))
            return EXIT_OK
        if args.command == "chain-status":
            print(render_chain_status(fetch_chain_status(args.master)))
            return EXIT_OK
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_USAGE


# --- bench ---

def bench_main(argv=None) -> int:
    parser = _Parser(prog="bench", description="Experiment matrix harness")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the scenario matrix and write a CSV report")
    run.add_argument("--matrix", default="full", choices=("full",))
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, metavar="CSV")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--rtt", type=float, default=100.0, metavar="MS")
    run.add_argument("--duration", type=int, default=300, metavar="S")
    run.add_argument("--recording", type=int, default=180, metavar="S")

    chk = sub.add_parser("assert", help="evaluate trend checks over a CSV report")
    chk.add_argument("--in", dest="infile", required=True, metavar="CSV")

    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args.verbose)

    if args.command == "run":
        try:
            reports = bench.run_matrix(
                seed=args.seed, duration=args.duration, workers=args.workers,
                recording=args.recording, rtt_ms=args.rtt,
                progress=lambda msg: print(msg, flush=True),
            )
        except bench.ScenarioError as exc:
            print(f"scenario error: {exc}", file=sys.stderr)
            return 1
        Path(args.out).write_bytes(bench.export_csv(reports))
        print(f"wrote {args.out} ({len(reports)} scenarios)")
        return EXIT_OK

    if args.command == "assert":
        try:
            rows = bench.parse_csv(Path(args.infile).read_bytes())
            checks = bench.assert_trends(rows)
        except (OSError, bench.ScenarioError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        failed = 0
        for check in checks:
            status = "PASS" if check.passed else "FAIL"
            print(f"[{status}] {check.name} @ {check.cell}: {check.detail}")
            failed += 0 if check.passed else 1
        print(f"{len(checks) - failed}/{len(checks)} checks passed")
        return EXIT_OK if failed == 0 else 1
    return EXIT_USAGE


# --- node daemon runner ---

def node_main(argv=None) -> int:
    parser = _Parser(prog="fogkit-node", description="Run a broker or worker daemon")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    broker = sub.add_parser("broker", help="run a master node")
    broker.add_argument("--config", required=True, metavar="JSON")

    worker = sub.add_parser("worker", help="run a worker node")
    worker.add_argument("--config", required=True, metavar="JSON")

    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args.verbose)

    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "broker":
        from .broker import BrokerNode
        from .cloudsim import WanModel

        wan_cfg = config.get("wan") or {}
        mode = config.get("mode")
        if mode is None:
            mode = "integrated" if config.get("cloud_enabled", False) else "fog_only"
        node = BrokerNode(
            node_id=config.get("node_id", "master"),
            mode=mode,
            blockchain_enabled=config.get("blockchain_enabled", True),
            difficulty=config.get("difficulty", 3),
            interval_ms=config.get("interval_ms", 0),
            heartbeat_ms=config.get("heartbeat_ms", 1000),
            wan=WanModel(**wan_cfg) if wan_cfg else None,
            peers=tuple(config.get("peers", ())),
            workers=tuple(config.get("workers", ())),
            port=config.get("port", 0),
        )
    else:
        from .worker import WorkerNode

        node = WorkerNode(
            node_id=config.get("node_id", "worker"),
            role=NodeRole(config.get("role", "compute-worker")),
            capacity_slots=config.get("capacity_slots", 1),
            port=config.get("port", 0),
        )

    address = node.start()
    print(f"{args.command} {node.node_id} serving on {address}", flush=True)
    if args.command == "worker":
        for master in config.get("register_to", ()):
            try:
                node.register_with(master)
                print(f"registered with {master}", flush=True)
            except Exception as exc:
                print(f"registration with {master} failed: {exc}", file=sys.stderr)

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    node.stop()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(gateway_main())
