"""One model replica: fetch every P steps, accumulate gradients, push every G steps."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from cortexforge.netcore import NetworkParams, joint_objective_and_gradient
from cortexforge.optim import MinibatchStream, SgdConfig

log = logging.getLogger(__name__)


class ReplicaAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class AsyncConfig:
    n_replicas: int = 2
    n_shards: int = 2
    fetch_period_P: int = 1
    push_period_G: int = 1
    sgd: SgdConfig = field(default_factory=SgdConfig)

    def __post_init__(self):
        for name in ("n_replicas", "n_shards", "fetch_period_P", "push_period_G"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


class Replica:
    """Transport-agnostic replica loop.

    ``transport`` provides ``fetch(shard_id, keys) -> ParamsResponse | None``
    and ``push(shard_id, PushGrads) -> Ack | None``; ``None`` means the shard
    did not answer in time, in which case the replica keeps its last-known
    fragments (fetch) or keeps the gradients for the next window (push).
    """

    def __init__(self, replica_id, images, template, plan, cfg, transport):
        if len(images) == 0:
            raise ReplicaAbort(f"replica {replica_id}: empty data portion")
        self.replica_id = replica_id
        self.images = images
        self.template = template
        self.plan = plan
        self.cfg = cfg
        self.transport = transport
        self.stream = MinibatchStream(len(images), cfg.sgd.minibatch_size, cfg.sgd.seed,
                                      f"sgd.shuffle.{replica_id}")
        self.shapes = {k: v.shape for k, v in template.learnable().items()}
        self.fragments = {}
        self.versions = {}
        self.accum = {}
        self.step_no = 0
        self.trace = []
        self.pushes = 0
        self._t0 = time.perf_counter()

    def start(self):
        """Initial fetch; every shard must answer."""
        for shard in range(self.plan.n_partitions):
            if not self._fetch_shard(shard):
                raise ReplicaAbort(f"replica {self.replica_id}: shard {shard} unreachable at startup")

    def _fetch_shard(self, shard):
        resp = self.transport.fetch(shard, self.plan.keys_for(shard))
        if resp is None:
            return False
        self.fragments.update(resp.tensors)
        self.versions[shard] = resp.version
        return True

    def current_params(self):
        return self.template.with_learnable(self.plan.merge(self.fragments, self.shapes))

    def done(self):
        return self.step_no >= self.cfg.sgd.max_steps

    def step(self):
        cfg = self.cfg
        if self.step_no % cfg.fetch_period_P == 0 and self.step_no > 0:
            for shard in range(self.plan.n_partitions):
                if not self._fetch_shard(shard):
                    log.info("replica %d: shard %d late, using version %s", self.replica_id,
                             shard, self.versions.get(shard))
        net = self.current_params()
        batch = self.images[self.stream.next()]
        value, grads = joint_objective_and_gradient(batch, net)
        full = {}
        for n, (g1, g2) in enumerate(grads, start=1):
            full[f"s{n}.w1"], full[f"s{n}.w2"] = g1, g2
        for key, g in self.plan.split(full).items():
            self.accum[key] = g.copy() if key not in self.accum else self.accum[key] + g
        self.step_no += 1
        if self.step_no % cfg.push_period_G == 0 or self.done():
            self.flush()
        self.trace.append((self.replica_id, self.step_no - 1, value,
                           (time.perf_counter() - self._t0) * 1000.0))
        return value

    def flush(self):
        from cortexforge.distrib.wire import PushGrads

        if not self.accum:
            return
        for shard in range(self.plan.n_partitions):
            keys = self.plan.keys_for(shard)
            msg = PushGrads(self.replica_id, self.step_no,
                            {k: self.accum[k] for k in keys if k in self.accum})
            self.pushes += 1
            if self.transport.push(shard, msg) is not None:
                for k in keys:
                    self.accum.pop(k, None)

    def run(self):
        self.start()
        while not self.done():
            self.step()
        return self.trace


def template_params(net):
    """Copy of ``net`` usable as a replica template (only H, G and the config matter)."""
    return NetworkParams(net.config, [s.copy() for s in net.stages], net.seed, net.whitening)


def replica_run(replica_id, data_portion, async_cfg, endpoints, template, plan):
    """Run one replica to its step budget and return its metrics trace.

    ``endpoints`` is a list of ``host:port`` strings (one per shard) or an
    already-built transport object.
    """
    from cortexforge.distrib.sockets import SocketTransport

    transport = SocketTransport(endpoints) if isinstance(endpoints, (list, tuple)) else endpoints
    images = np.asarray(getattr(data_portion, "images", data_portion))
    try:
        return Replica(replica_id, images, template, plan, async_cfg, transport).run()
    finally:
        if hasattr(transport, "close"):
            transport.close()
