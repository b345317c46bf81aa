"""Binary checkpoint format.

Layout (little-endian)::

    b"LSAE"  u32 version=1  u64 seed
    u32 n_stages, then per stage every StageConfig field in declaration order
        (integers as u32, reals as f64)
    u32 tensor_count, then per tensor:
        u16 name_len, UTF-8 name, u8 rank, u64 dims[rank], raw f32 data
"""

import io
import struct

import numpy as np

from cortexforge.netcore import (
    STAGE_FIELDS,
    NetworkConfig,
    NetworkParams,
    StageConfig,
    StageParams,
)

MAGIC = b"LSAE"
VERSION = 1

_REAL_FIELDS = {"lcn_floor_c", "sparsity_lambda", "sparsity_epsilon"}


class CheckpointError(ValueError):
    pass


def write_tensor_table(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())


def _take(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor_table(buf):
    (count,) = struct.unpack("<I", _take(buf, 4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _take(buf, 2))
        name = _take(buf, name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", _take(buf, 1))
        dims = struct.unpack(f"<{rank}Q", _take(buf, 8 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(_take(buf, 4 * n), dtype="<f4").astype(np.float32)
        tensors[name] = data.reshape(dims)
    return tensors


def _write_config(buf, config):
    buf.write(struct.pack("<I", len(config.stages)))
    for cfg in config.stages:
        for name in STAGE_FIELDS:
            value = getattr(cfg, name)
            if name in _REAL_FIELDS:
                buf.write(struct.pack("<d", float(value)))
            else:
                buf.write(struct.pack("<I", int(value)))


def _read_config(buf):
    (n_stages,) = struct.unpack("<I", _take(buf, 4))
    stages = []
    for _ in range(n_stages):
        kwargs = {}
        for name in STAGE_FIELDS:
            if name in _REAL_FIELDS:
                (kwargs[name],) = struct.unpack("<d", _take(buf, 8))
            else:
                (kwargs[name],) = struct.unpack("<I", _take(buf, 4))
        stages.append(StageConfig(**kwargs))
    return NetworkConfig(tuple(stages))


def dumps(net):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, int(net.seed) & 0xFFFFFFFFFFFFFFFF))
    _write_config(buf, net.config)
    tensors = dict(net.named_tensors())
    if net.whitening is not None:
        tensors["whiten.mean"] = net.whitening.mean
        tensors["whiten.map"] = net.whitening.transform
    write_tensor_table(buf, tensors)
    return buf.getvalue()


def loads(data):
    from cortexforge.data import WhiteningTransform

    buf = io.BytesIO(data)
    if _take(buf, 4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, seed = struct.unpack("<IQ", _take(buf, 12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = _read_config(buf)
    tensors = read_tensor_table(buf)
    stages = []
    for n in range(1, len(config.stages) + 1):
        try:
            stages.append(StageParams(tensors[f"s{n}.w1"], tensors[f"s{n}.w2"],
                                      tensors[f"s{n}.h"], tensors[f"s{n}.g"]))
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing tensor {exc.args[0]}") from None
    whitening = None
    if "whiten.mean" in tensors:
        whitening = WhiteningTransform(tensors["whiten.mean"], tensors["whiten.map"])
    return NetworkParams(config, stages, seed=seed, whitening=whitening)


def save(path, net):
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
