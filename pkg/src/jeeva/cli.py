"""Command-line entry points: scheduler, executor, client, portal, bench."""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading

from . import bench
from .executor import (
    DEFAULT_HEARTBEAT_S,
    DEFAULT_TASK_LIMIT_S,
    DependencyRegistry,
    DirModels,
    ExecutorService,
)
from .client import DEFAULT_POLL_MS, TaskClientService
from .portal import PortalServer, PortalService
from .scheduler import DEFAULT_DEAD_AFTER, DEFAULT_HEARTBEAT_MS
from .server import SchedulerServer
from .store import Store


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _data_dir() -> str:
    return os.environ.get("JEEVA_DATA_DIR", os.path.join(os.getcwd(), "jeeva-data"))


def _setup_logging(verbose: bool, log_file: str | None = None,
                   events_to_stdout: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    events = logging.getLogger("jeeva.scheduler.events")
    if events_to_stdout:
        # one line per task/node transition, on stdout as well as the log
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        events.addHandler(handler)
        events.propagate = False
    if log_file:
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        events.addHandler(handler)


def _wait_for_interrupt() -> None:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass


def cmd_scheduler(args) -> int:
    _setup_logging(args.verbose, args.log_file, events_to_stdout=True)
    server = SchedulerServer(listen=args.listen, token=args.token,
                             heartbeat_ms=args.heartbeat_ms,
                             dead_after=args.dead_after).start()
    print(f"scheduler listening on {server.address[0]}:{server.address[1]}", flush=True)
    _wait_for_interrupt()
    server.stop()
    return 0


def cmd_executor(args) -> int:
    _setup_logging(args.verbose)
    registry = DependencyRegistry.parse_file(args.deps) if args.deps else DependencyRegistry()
    models = DirModels(args.models) if args.models else None
    node_id = args.node_id or f"exec-{os.getpid()}"
    service = ExecutorService(
        scheduler_addr=args.scheduler, node_id=node_id, slots=args.slots,
        token=args.token, registry=registry, models=models,
        work_root=args.work_root, task_limit_s=args.limit_s,
        heartbeat_s=args.heartbeat_ms / 1000.0,
        keep_failed_sandbox=args.keep_failed_sandbox,
    )
    service.start()
    print(f"executor {node_id} serving {args.slots} slot(s)", flush=True)
    _wait_for_interrupt()
    service.stop()
    return 0


def cmd_client(args) -> int:
    _setup_logging(args.verbose)
    store = Store(args.store, outbox_dir=args.outbox)
    service = TaskClientService(store, args.scheduler, models_dir=args.models,
                                token=args.token, poll_ms=args.poll_ms)
    print(f"task client polling {args.store} every {args.poll_ms}ms", flush=True)
    try:
        service.run_forever()
    except KeyboardInterrupt:
        service.stop()
    return 0


def cmd_portal(args) -> int:
    _setup_logging(args.verbose)
    store = Store(args.store, outbox_dir=args.outbox, compact=True)
    store.purge_expired_anonymous()
    service = PortalService(store, scheduler_addr=args.scheduler,
                            grid_token=args.grid_token, console_dir=args.console)
    if args.admin:
        email, _, password = args.admin.partition(":")
        if not password:
            print("--admin must be email:password", file=sys.stderr)
            return 2
        service.ensure_admin(email, password)
    server = PortalServer(service, listen=args.listen).start()
    print(f"portal listening on http://{server.address[0]}:{server.address[1]}",
          flush=True)
    _wait_for_interrupt()
    server.stop()
    return 0


def cmd_bench(args) -> int:
    model = (bench.ServiceTimeModel.parse_file(args.model) if args.model
             else bench.default_model())
    if args.experiment == "phase":
        header, rows = bench.phase_breakdown(model, args.lengths)
    elif args.experiment == "speedup":
        header, rows = bench.speedup_experiment(model, lengths=args.lengths,
                                                executors=args.executors or range(1, 7))
    else:
        header, rows = bench.scalability_experiment(
            model, jobs=args.jobs, executors=args.executors or (1, 2, 4, 8, 16, 32, 36),
            seed=args.seed)
    csv_text = bench.format_csv(header, rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv_text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_make_fixtures(args) -> int:
    from . import fixtures

    tables = [fixtures.synthetic_property_table()]
    if args.kind == "separable":
        models = fixtures.separable_models(window=args.window, tables=tables)
    else:
        models = fixtures.random_models(window=args.window, tables=tables,
                                        seed=args.seed)
    fixtures.write_model_dir(args.out, models, tables)
    print(f"wrote {len(models)} model files + property table to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jeeva")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scheduler", help="run the task scheduler")
    p.add_argument("--listen", type=_addr, default=("0.0.0.0", 9100))
    p.add_argument("--token", default=None)
    p.add_argument("--heartbeat-ms", type=int, default=DEFAULT_HEARTBEAT_MS)
    p.add_argument("--dead-after", type=int, default=DEFAULT_DEAD_AFTER,
                   help="missed heartbeats before a node is declared dead")
    p.add_argument("--log-file", default=None, help="event log file")
    p.set_defaults(fn=cmd_scheduler)

    p = sub.add_parser("executor", help="run a worker node")
    p.add_argument("--scheduler", type=_addr, required=True)
    p.add_argument("--token", default="")
    p.add_argument("--slots", type=int, default=1)
    p.add_argument("--deps", default=None, help="dependency registry file")
    p.add_argument("--models", default=None, help="deployed classifier model dir")
    p.add_argument("--node-id", default=None)
    p.add_argument("--limit-s", type=float, default=DEFAULT_TASK_LIMIT_S)
    p.add_argument("--heartbeat-ms", type=int,
                   default=int(DEFAULT_HEARTBEAT_S * 1000))
    p.add_argument("--work-root", default=None)
    p.add_argument("--keep-failed-sandbox", action="store_true")
    p.set_defaults(fn=cmd_executor)

    p = sub.add_parser("client", help="run the store-polling task client")
    p.add_argument("--scheduler", type=_addr, required=True)
    p.add_argument("--store", default=os.path.join(_data_dir(), "store"))
    p.add_argument("--outbox", default=os.path.join(_data_dir(), "outbox"))
    p.add_argument("--poll-ms", type=int, default=DEFAULT_POLL_MS)
    p.add_argument("--models", required=True, help="model dir (refs for C..H)")
    p.add_argument("--token", default="")
    p.set_defaults(fn=cmd_client)

    p = sub.add_parser("portal", help="run the HTTP portal")
    p.add_argument("--listen", type=_addr, default=("0.0.0.0", 8080))
    p.add_argument("--store", default=os.path.join(_data_dir(), "store"))
    p.add_argument("--outbox", default=os.path.join(_data_dir(), "outbox"))
    p.add_argument("--scheduler", type=_addr, default=None)
    p.add_argument("--grid-token", default="")
    p.add_argument("--admin", default=None, help="bootstrap admin as email:password")
    p.add_argument("--console", default=None, help="static console bundle dir")
    p.set_defaults(fn=cmd_portal)

    p = sub.add_parser("bench", help="virtual-time experiments")
    p.add_argument("--experiment", choices=("phase", "speedup", "scale"),
                   required=True)
    p.add_argument("--executors", type=_int_list, default=None)
    p.add_argument("--jobs", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--lengths", type=_int_list, default=list(bench.FIG10_LENGTHS))
    p.add_argument("--model", default=None, help="service-time model file")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("make-fixtures", help="generate toy models + property table")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--kind", choices=("separable", "random"), default="separable")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_make_fixtures)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
