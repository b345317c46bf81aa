"""Sharded parameter servers and asynchronous model replicas."""

from cortexforge.distrib.partition import PartitionPlan, partition_parameters
from cortexforge.distrib.replica import AsyncConfig, Replica, ReplicaAbort, replica_run
from cortexforge.distrib.shard import GradientUpdate, ShardActor, ShardState, shard_apply
from cortexforge.distrib.training import run_async_training
from cortexforge.distrib.wire import (
    Ack,
    FetchParams,
    ParamsResponse,
    PushGrads,
    WireError,
    decode_message,
    encode_message,
)

__all__ = [
    "Ack", "AsyncConfig", "FetchParams", "GradientUpdate", "ParamsResponse",
    "PartitionPlan", "PushGrads", "Replica", "ReplicaAbort", "ShardActor", "ShardState",
    "WireError", "decode_message", "encode_message", "partition_parameters",
    "replica_run", "run_async_training", "shard_apply",
]
