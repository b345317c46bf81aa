"""Deterministic in-process scheduler for replicas and shards.

Time advances one tick per replica step.  Which replica steps next is drawn
from a seeded generator, so a given seed always yields the same interleaving.
A shard may be given a delay of T ticks: its requests are then served T ticks
after they are sent.  A replica never waits for a late fetch (it keeps its
last-known fragments); late pushes are queued and applied in arrival order.
Every message passes through the wire codec.
"""

import heapq
import itertools
import logging
from collections import Counter

from cortexforge.distrib import wire
from cortexforge.rng import substream

log = logging.getLogger(__name__)

# returned for a push that was queued behind a delayed shard: it will be
# applied later, so the replica must not resend it
QUEUED = object()


class SimTransport:
    def __init__(self, sim, replica_id):
        self.sim = sim
        self.replica_id = replica_id

    def fetch(self, shard_id, keys):
        return self.sim.request(shard_id, wire.FetchParams(shard_id, list(keys)), blocking=False)

    def push(self, shard_id, msg):
        reply = self.sim.request(shard_id, msg, blocking=False)
        return QUEUED if reply is None else reply


class Simulator:
    def __init__(self, shards, seed=0, shard_delays=None):
        self.shards = shards
        self.delays = dict(shard_delays or {})
        self.rng = substream(seed, "sim.schedule")
        self.now = 0
        self._queue = []
        self._seq = itertools.count()
        self.wire_counts = Counter()
        self.starting = False

    def request(self, shard_id, msg, blocking):
        frame = wire.encode_message(msg)
        self.wire_counts[type(msg).__name__] += 1
        delay = 0 if (blocking or self.starting) else self.delays.get(shard_id, 0)
        if delay == 0:
            reply = self.shards[shard_id].handle_frame(frame)
            self.wire_counts[type(wire.decode_message(reply)).__name__] += 1
            return wire.decode_message(reply)
        heapq.heappush(self._queue, (self.now + delay, next(self._seq), shard_id, frame))
        return None

    def _deliver(self, until):
        while self._queue and self._queue[0][0] <= until:
            _, _, shard_id, frame = heapq.heappop(self._queue)
            reply = self.shards[shard_id].handle_frame(frame)
            self.wire_counts[type(wire.decode_message(reply)).__name__] += 1

    def run(self, replicas, kill=None):
        """Step replicas to completion; ``kill`` maps replica id -> step at which it dies."""
        kill = dict(kill or {})
        self.starting = True
        for r in replicas:
            r.start()
        self.starting = False
        active = [r for r in replicas if not r.done()]
        while active:
            r = active[int(self.rng.integers(len(active)))]
            if kill.get(r.replica_id) == r.step_no:
                log.warning("replica %d killed at step %d", r.replica_id, r.step_no)
                active.remove(r)
                continue
            r.step()
            self.now += 1
            self._deliver(self.now)
            if r.done():
                active.remove(r)
        self._deliver(float("inf"))
