"""Parameter-server shard state and its serial message handler."""

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from cortexforge.distrib import wire
from cortexforge.optim import apply_update

log = logging.getLogger(__name__)


class UpdateRejected(KeyError):
    pass


@dataclass
class ShardState:
    shard_id: int
    values: dict
    version: int = 0


@dataclass
class GradientUpdate:
    gradients: dict
    replica_id: int = 0
    step: int = 0


def shard_apply(shard, update, lr):
    """Apply one update: value -= lr * gradient for each key, version + 1.

    An update naming an unknown key, or with a mismatched fragment shape, is
    rejected whole and the shard is returned unchanged.
    """
    grads = update.gradients if isinstance(update, GradientUpdate) else update
    unknown = sorted(set(grads) - set(shard.values))
    if unknown:
        raise UpdateRejected(f"shard {shard.shard_id}: unknown keys {unknown}")
    for key, g in grads.items():
        if np.shape(g) != shard.values[key].shape:
            raise UpdateRejected(f"shard {shard.shard_id}: {key} gradient shape "
                                 f"{np.shape(g)} != {shard.values[key].shape}")
    values = dict(shard.values)
    for key, g in grads.items():
        values[key] = apply_update(values[key], g, lr)
    return ShardState(shard.shard_id, values, shard.version + 1)


@dataclass
class ShardActor:
    """Owns one ShardState; handles request frames strictly one at a time."""

    state: ShardState
    lr: float
    applied: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def handle(self, msg):
        with self._lock:
            if isinstance(msg, wire.FetchParams):
                keys = msg.keys or list(self.state.values)
                missing = [k for k in keys if k not in self.state.values]
                if missing:
                    raise UpdateRejected(f"shard {self.state.shard_id}: unknown keys {missing}")
                return wire.ParamsResponse(self.state.version,
                                           {k: self.state.values[k] for k in keys})
            if isinstance(msg, wire.PushGrads):
                try:
                    self.state = shard_apply(self.state, GradientUpdate(msg.tensors, msg.replica_id,
                                                                        msg.step), self.lr)
                    self.applied.append((msg.replica_id, msg.step))
                except UpdateRejected as exc:
                    log.warning("%s", exc)
                return wire.Ack(self.state.version)
            raise wire.WireError(f"shard cannot handle {type(msg).__name__}")

    def handle_frame(self, frame):
        return wire.encode_message(self.handle(wire.decode_message(frame)))
