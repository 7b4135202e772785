"""Command line: run a node, talk to a cluster, run the benchmarks."""

from __future__ import annotations

import json
import logging
import os
import sys

import click

from .errors import EdgeKVError

DEFAULT_CONNECT = "127.0.0.1:7000"


def _csv_list(kind):
    def convert(ctx, param, value):
        if value is None:
            return None
        try:
            return [kind(v) for v in str(value).split(",") if v.strip()]
        except ValueError as exc:
            raise click.BadParameter(str(exc)) from None

    return convert


def _value(raw: str) -> bytes:
    """A literal string, ``@path`` for a file's bytes, or ``-`` for stdin."""
    if raw == "-":
        return sys.stdin.buffer.read()
    if raw.startswith("@"):
        with open(raw[1:], "rb") as f:
            return f.read()
    return raw.encode()


def _client(ctx):
    from .client import Client

    return Client(ctx.obj["connect"], timeout=ctx.obj["timeout"])


def _version_line(pkv: int, seq: int, ts: int) -> str:
    return f"pkv={pkv} seq={seq} ts={ts}"


@click.group()
@click.option("--connect", envvar="EDGEKV_CONNECT", default=DEFAULT_CONNECT, show_default=True,
              help="Comma-separated host:port list of nodes to contact.")
@click.option("--timeout", default=15.0, show_default=True, help="Per-request timeout in seconds.")
@click.option("--log-level", default="WARNING", show_default=True)
@click.pass_context
def cli(ctx, connect, timeout, log_level):
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(connect=connect, timeout=timeout)


# -- node ---------------------------------------------------------------------


@cli.group()
def node():
    """Run a storage node."""


@node.command("start")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dfg", "dfg_path", type=click.Path(exists=True, dir_okay=False), help="DFG JSON; overrides the config's dfg.")
def node_start(config_path, dfg_path):
    """Start the node described by a config file and serve until killed."""
    from .config import load_config
    from .node import serve_forever

    cfg = load_config(config_path)
    if dfg_path:
        cfg.dfg = os.path.abspath(dfg_path)
    serve_forever(cfg)


# -- client verbs ---------------------------------------------------------------


@cli.command()
@click.argument("key")
@click.argument("value")
@click.pass_context
def put(ctx, key, value):
    """Replicated put; the pool decides volatile or persistent."""
    with _client(ctx) as c:
        v = c.put(key, _value(value))
    click.echo(_version_line(v.per_key_version, v.shard_seq, v.timestamp_us))


@cli.command()
@click.argument("key")
@click.option("--version", "version", type=int, help="Per-key version number.")
@click.option("--time", "t_us", type=int, help="Wall-clock microseconds; newest version at or before it.")
@click.option("--range", "vrange", nargs=2, type=int, help="Inclusive per-key version range LO HI.")
@click.option("--node", "node_id", type=int, help="Read from this member instead of a random one.")
@click.option("--raw", is_flag=True, help="Write only the payload bytes.")
@click.pass_context
def get(ctx, key, version, t_us, vrange, node_id, raw):
    """Read the current version, or a past one."""
    with _client(ctx) as c:
        if vrange:
            objs = c.get_range(key, vrange[0], vrange[1], node_id=node_id)
        elif version is not None:
            objs = [c.get_by_version(key, version, node_id=node_id)]
        elif t_us is not None:
            objs = [c.get_by_time(key, t_us, node_id=node_id)]
        else:
            objs = [c.get(key, node_id=node_id)]
    for obj in objs:
        if raw:
            sys.stdout.buffer.write(bytes(obj.payload))
            continue
        v = obj.version
        click.echo(f"{obj.key.full} {_version_line(v.per_key_version, v.shard_seq, v.timestamp_us)} size={len(obj.payload)}")
        click.echo(bytes(obj.payload).decode("utf-8", errors="replace"))


@cli.command()
@click.argument("key")
@click.argument("value")
@click.pass_context
def trigput(ctx, key, value):
    """Hand an object to one member's lambdas without storing it."""
    with _client(ctx) as c:
        c.trigger_put(key, _value(value))
    click.echo("ok")


@cli.command()
@click.argument("topic")
@click.option("--count", type=int, default=0, help="Exit after this many notifications (0 = forever).")
@click.pass_context
def sub(ctx, topic, count):
    """Print notifications for a topic name, or for every key under a '/path'."""
    with _client(ctx) as c:
        s = c.subscribe(topic)
        seen = 0
        for note in s:
            v = note.version
            payload = bytes(note.payload).decode("utf-8", errors="replace")
            click.echo(f"{note.topic} {_version_line(v.per_key_version, v.shard_seq, v.timestamp_us)} {payload}")
            seen += 1
            if count and seen >= count:
                break


@cli.command()
@click.argument("topic")
@click.argument("value")
@click.option("--persistent", is_flag=True, help="The topic pool is persistent.")
@click.pass_context
def pub(ctx, topic, value, persistent):
    """Publish to a topic."""
    with _client(ctx) as c:
        msg = c.publish(topic, _value(value), persistent=persistent)
    click.echo(_version_line(msg.pkv, msg.seq, msg.ts))


@cli.command()
@click.option("--node", "node_id", type=int)
@click.pass_context
def status(ctx, node_id):
    """Print one node's STATUS JSON."""
    with _client(ctx) as c:
        click.echo(json.dumps(c.status(node_id), indent=2))


# -- benchmarks -----------------------------------------------------------------


@cli.group()
def bench():
    """Microbenchmarks; each writes a samples CSV and a .summary.csv beside it."""


def _finish(report, csv_path):
    click.echo(report.format_table())
    for k, v in report.extra.items():
        click.echo(f"{k}: {json.dumps(v) if isinstance(v, dict) else v}")
    if csv_path:
        click.echo(f"samples: {csv_path}")


_mode = click.option("--mode", type=click.Choice(["process", "thread"]), default="process", show_default=True,
                     help="How to run the loopback cluster.")


@bench.command("put")
@click.option("--op", default="trig,vola,pers", show_default=True, callback=_csv_list(str))
@click.option("--size", default=10240, show_default=True, type=int)
@click.option("--rate", default="100", show_default=True, callback=_csv_list(float), help="Ops/s; a list runs a sweep.")
@click.option("--duration", default=5.0, show_default=True)
@click.option("--shard-size", default=3, show_default=True)
@click.option("--clients", default=1, show_default=True)
@click.option("--cluster", "use_cluster", is_flag=True, help="Use the nodes given by --connect instead of starting some.")
@click.option("--no-baseline", is_flag=True, help="Skip the 10%-rate run used to flag saturation.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False))
@_mode
@click.pass_context
def bench_put(ctx, op, size, rate, duration, shard_size, clients, use_cluster, no_baseline, csv_path, mode):
    """Open-loop put latency by put type, size and rate."""
    from .bench import run_put_bench
    from .client import _parse_addr

    seeds = [_parse_addr(s) for s in ctx.obj["connect"].split(",")] if use_cluster else None
    report = run_put_bench(op, size, rate, duration, shard_size, clients, seeds=seeds, mode=mode,
                           baseline=not no_baseline, csv_path=csv_path)
    _finish(report, csv_path)


@bench.command("pipeline")
@click.option("--k", "ks", default="1,2,3,4", show_default=True, callback=_csv_list(int))
@click.option("--edge", default="trigger,volatile", show_default=True, callback=_csv_list(str))
@click.option("--size", default=1024, show_default=True, type=int)
@click.option("--rate", default=50.0, show_default=True)
@click.option("--duration", default=3.0, show_default=True)
@click.option("--nodes", default=3, show_default=True)
@click.option("--shard-size", default=3, show_default=True)
@click.option("--inflight", default=16, show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False))
@_mode
def bench_pipeline(ks, edge, size, rate, duration, nodes, shard_size, inflight, csv_path, mode):
    """k-stage no-op pipeline latency and throughput per edge type."""
    from .bench import run_pipeline_bench

    report = run_pipeline_bench(ks, edge, size, rate, duration, nodes=nodes, shard_size=shard_size,
                                inflight=inflight, mode=mode, csv_path=csv_path)
    _finish(report, csv_path)


@bench.command("fastpath")
@click.option("--size", default="10240,1048576", show_default=True, callback=_csv_list(int))
@click.option("--policy", default="round_robin,fifo_by_key", show_default=True, callback=_csv_list(str))
@click.option("--rate", default=200.0, show_default=True)
@click.option("--duration", default=3.0, show_default=True)
@click.option("--workers", type=int)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False))
def bench_fastpath(size, policy, rate, duration, workers, csv_path):
    """Single-node dispatch breakdown and trie per-level cost."""
    from .bench import run_fastpath_bench

    report = run_fastpath_bench(size, policy, rate, duration, workers=workers, csv_path=csv_path)
    _finish(report, csv_path)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="edgekv", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except EdgeKVError as exc:
        click.echo(f"error {exc.code} {type(exc).__name__}: {exc}", err=True)
        return 1
    except KeyboardInterrupt:
        return 130
    return 0


def run() -> None:
    sys.exit(main())
