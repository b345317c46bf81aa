"""Locality-based split of the learnable weights into vertical image strips."""

from dataclasses import dataclass

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionPlan:
    """``assignment`` maps ``(param_name, partition) -> (col_start, col_stop)``.

    Column ranges index axis 1 (output columns) of a weight tensor, so each
    fragment holds the filters whose receptive fields sit in one image strip.
    """

    n_partitions: int
    assignment: dict

    def fragment_key(self, name, part):
        return f"{name}@{part}"

    def keys_for(self, part):
        return [self.fragment_key(name, p) for (name, p) in self.assignment if p == part]

    def owner(self, name, column):
        for (n, p), (lo, hi) in self.assignment.items():
            if n == name and lo <= column < hi:
                return p
        raise KeyError((name, column))

    def split(self, tensors):
        """Full tensors ``{name: array}`` -> fragments ``{key: array}``."""
        out = {}
        for (name, part), (lo, hi) in self.assignment.items():
            if name in tensors:
                out[self.fragment_key(name, part)] = np.ascontiguousarray(tensors[name][:, lo:hi])
        return out

    def merge(self, fragments, shapes):
        """Inverse of :meth:`split`; ``shapes`` gives each full tensor's shape."""
        out = {name: np.empty(shape, dtype=np.float32) for name, shape in shapes.items()}
        for (name, part), (lo, hi) in self.assignment.items():
            out[name][:, lo:hi] = fragments[self.fragment_key(name, part)]
        return out

    def shard_of(self, key):
        return int(key.rsplit("@", 1)[1])


def column_partition(n_columns, n_partitions):
    """Partition id of each receptive-field column: contiguous near-equal runs, left to right."""
    if n_partitions < 1:
        raise PartitionError("n_partitions must be positive")
    if n_partitions > n_columns:
        raise PartitionError(f"{n_partitions} partitions exceed {n_columns} receptive-field columns")
    return [j * n_partitions // n_columns for j in range(n_columns)]


def partition_parameters(net_cfg, n_partitions):
    """Assign every W1/W2 entry of every stage to one of ``n_partitions`` strips."""
    assignment = {}
    for n, cfg in enumerate(net_cfg.stages, start=1):
        parts = column_partition(cfg.out_width, n_partitions)
        for part in range(n_partitions):
            cols = [j for j, p in enumerate(parts) if p == part]
            for which in ("w1", "w2"):
                assignment[(f"s{n}.{which}", part)] = (cols[0], cols[-1] + 1)
    return PartitionPlan(n_partitions, assignment)
