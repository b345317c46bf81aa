"""Asynchronous SGD over sharded parameter servers, simulated or over TCP."""

import logging
import multiprocessing as mp
import os
import queue
import signal
import threading

import numpy as np

from cortexforge.distrib.partition import partition_parameters
from cortexforge.distrib.replica import Replica, ReplicaAbort, template_params
from cortexforge.distrib.shard import ShardActor, ShardState
from cortexforge.distrib.sim import SimTransport, Simulator
from cortexforge.netcore import init_network

log = logging.getLogger(__name__)


def initial_shards(net, plan, lr):
    fragments = plan.split(net.learnable())
    return [ShardActor(ShardState(s, {k: fragments[k] for k in plan.keys_for(s)}), lr)
            for s in range(plan.n_partitions)]


def split_round_robin(images, n):
    portions = [images[r::n] for r in range(n)]
    if any(len(p) == 0 for p in portions):
        raise ValueError(f"dataset of {len(images)} cannot feed {n} replicas")
    return portions


def _assemble(template, plan, fragments):
    shapes = {k: v.shape for k, v in template.learnable().items()}
    return template.with_learnable(plan.merge(fragments, shapes))


def run_async_training(dataset, net_cfg, async_cfg, seed=0, mode="simulation", init=None,
                       kill=None, shard_delays=None, whitening=None, host="127.0.0.1",
                       endpoints=None):
    """Train with ``n_replicas`` asynchronous replicas against ``n_shards`` shards.

    Returns ``(params, metrics)``; ``metrics`` holds the merged per-step
    ``trace`` (replica, step, objective, wall_ms), final ``shard_versions`` and
    message counts.  ``kill`` maps replica id -> step at which that replica
    dies; the run tolerates it.  In socket mode, ``endpoints`` points the
    replicas at already-running shards instead of launching local ones.
    """
    images = np.asarray(getattr(dataset, "images", dataset))
    net = init if init is not None else init_network(net_cfg, seed)
    if whitening is not None:
        net.whitening = whitening
    plan = partition_parameters(net.config, async_cfg.n_shards)
    portions = split_round_robin(images, async_cfg.n_replicas)
    template = template_params(net)
    if mode == "simulation":
        return _run_simulated(portions, template, plan, async_cfg, seed, kill, shard_delays)
    if mode == "socket":
        return _run_sockets(portions, template, plan, async_cfg, kill, host, endpoints)
    raise ValueError(f"unknown mode {mode!r}")


def _run_simulated(portions, template, plan, cfg, seed, kill, shard_delays):
    shards = initial_shards(template, plan, cfg.sgd.learning_rate)
    sim = Simulator(shards, seed=seed, shard_delays=shard_delays)
    replicas = [Replica(r, portions[r], template, plan, cfg, SimTransport(sim, r))
                for r in range(cfg.n_replicas)]
    sim.run(replicas, kill=kill)
    fragments = {}
    for s in shards:
        fragments.update(s.state.values)
    trace = sorted((t for r in replicas for t in r.trace), key=lambda t: (t[1], t[0]))
    metrics = {
        "trace": trace,
        "shard_versions": [s.state.version for s in shards],
        "wire_counts": dict(sim.wire_counts),
        "pushes": {r.replica_id: r.pushes for r in replicas},
        "steps": {r.replica_id: r.step_no for r in replicas},
    }
    return _assemble(template, plan, fragments), metrics


# ---------------------------------------------------------------------------
# socket mode


def serve_shard(actor, host="127.0.0.1", port=0, ready=None):
    """Serve one shard until SIGTERM/SIGINT; ``ready`` receives the bound port."""
    from cortexforge.distrib.sockets import ShardServer

    server = ShardServer((host, port), actor)
    if ready is not None:
        ready(server.server_address[1])

    def stop(*_):
        threading.Thread(target=server.shutdown, daemon=True).start()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, stop)
        signal.signal(signal.SIGINT, stop)
    try:
        server.serve_forever(poll_interval=0.05)
    finally:
        server.server_close()


def _shard_main(state, lr, host, ready_queue):
    serve_shard(ShardActor(state, lr), host, 0, ready=ready_queue.put)


def _replica_main(replica_id, images, template, plan, cfg, endpoints, die_at, queue):
    from cortexforge.distrib.sockets import SocketTransport

    transport = SocketTransport(endpoints)
    try:
        replica = Replica(replica_id, images, template, plan, cfg, transport)
        replica.start()
        while not replica.done():
            if die_at is not None and replica.step_no == die_at:
                os._exit(1)
            replica.step()
        queue.put((replica_id, "ok", replica.trace, replica.pushes))
    except ReplicaAbort as exc:
        queue.put((replica_id, "abort", str(exc), 0))
    finally:
        transport.close()


def _run_sockets(portions, template, plan, cfg, kill, host, endpoints=None):
    from cortexforge.distrib.sockets import SocketTransport

    ctx = mp.get_context("spawn")
    kill = dict(kill or {})
    shard_procs = []
    if endpoints:
        if len(endpoints) != plan.n_partitions:
            raise ValueError(f"{len(endpoints)} endpoints for {plan.n_partitions} shards")
        actors = []
    else:
        endpoints = []
        actors = initial_shards(template, plan, cfg.sgd.learning_rate)
    for actor in actors:
        q = ctx.Queue()
        p = ctx.Process(target=_shard_main, args=(actor.state, actor.lr, host, q), daemon=True)
        p.start()
        shard_procs.append(p)
        endpoints.append(f"{host}:{q.get(timeout=60)}")
    try:
        results = ctx.Queue()
        workers = []
        for r in range(cfg.n_replicas):
            p = ctx.Process(target=_replica_main,
                            args=(r, portions[r], template, plan, cfg, endpoints, kill.get(r),
                                  results))
            p.start()
            workers.append(p)
        reports = []
        pending = set(range(cfg.n_replicas))
        while pending:
            try:
                rep = results.get(timeout=0.2)
                reports.append(rep)
                pending.discard(rep[0])
            except queue.Empty:
                for r in list(pending):
                    if not workers[r].is_alive() and workers[r].exitcode != 0:
                        pending.discard(r)
        for p in workers:
            p.join()
        aborted = [r for r in reports if r[1] == "abort"]
        if aborted:
            raise ReplicaAbort("; ".join(r[2] for r in aborted))
        for r, p in enumerate(workers):
            if p.exitcode != 0:
                log.warning("replica %d died (exit code %s); continuing", r, p.exitcode)
        client = SocketTransport(endpoints)
        fragments, versions = {}, []
        for s in range(plan.n_partitions):
            resp = client.fetch(s, plan.keys_for(s))
            if resp is None:
                raise ConnectionError(f"shard {s} unreachable at the end of the run")
            fragments.update(resp.tensors)
            versions.append(resp.version)
        client.close()
    finally:
        for p in shard_procs:
            p.terminate()
            p.join(timeout=10)
    trace = sorted((t for rep in reports for t in rep[2]), key=lambda t: (t[1], t[0]))
    metrics = {
        "trace": trace,
        "shard_versions": versions,
        "pushes": {rep[0]: rep[3] for rep in reports},
        "endpoints": endpoints,
    }
    return _assemble(template, plan, fragments), metrics
