"""Binary checkpoint container.

Layout: magic "RLRC", version u32, header length u32, JSON header
(model config + metadata), entry count u32, then named tensor entries.
Dense entries store raw little-endian float32; quantized entries store
{bits, block_size, shape, scales, packed codes}.  Round-trips are
bit-exact.
"""

import io
import json
import struct

import numpy as np

from .model import ModelConfig, PolicyModel, ValueHead, init_model, init_value_head
from .quant import QuantLayer, QuantizedModel, QuantizedTensor, QUANT_MATRICES
from .tensor import Tensor

MAGIC = b"RLRC"
VERSION = 1

KIND_DENSE = 0
KIND_QUANT = 1


class CheckpointError(IOError):
    pass


def _w_u32(f, v):
    f.write(struct.pack("<I", v))


def _w_u8(f, v):
    f.write(struct.pack("<B", v))


def _read(f, n):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def _r_u32(f):
    return struct.unpack("<I", _read(f, 4))[0]


def _r_u8(f):
    return struct.unpack("<B", _read(f, 1))[0]


def _write_dense(f, name, arr):
    nb = name.encode("utf-8")
    _w_u32(f, len(nb))
    f.write(nb)
    _w_u8(f, KIND_DENSE)
    arr = np.asarray(arr, dtype=np.float32)
    _w_u32(f, arr.ndim)
    for e in arr.shape:
        _w_u32(f, e)
    f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def _write_quant(f, name, qt):
    nb = name.encode("utf-8")
    _w_u32(f, len(nb))
    f.write(nb)
    _w_u8(f, KIND_QUANT)
    _w_u32(f, qt.bits)
    _w_u32(f, qt.block_size)
    _w_u32(f, len(qt.shape))
    for e in qt.shape:
        _w_u32(f, e)
    _w_u32(f, qt.scales.size)
    f.write(qt.scales.astype("<f4").tobytes())
    _w_u32(f, qt.packed.nbytes)
    f.write(qt.packed.tobytes())


def _read_entry(f):
    name = _read(f, _r_u32(f)).decode("utf-8")
    kind = _r_u8(f)
    if kind == KIND_DENSE:
        rank = _r_u32(f)
        shape = tuple(_r_u32(f) for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(_read(f, 4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        return name, ("dense", arr)
    if kind == KIND_QUANT:
        bits = _r_u32(f)
        block = _r_u32(f)
        rank = _r_u32(f)
        shape = tuple(_r_u32(f) for _ in range(rank))
        n_scales = _r_u32(f)
        scales = np.frombuffer(_read(f, 4 * n_scales), dtype="<f4").astype(np.float32)
        packed_len = _r_u32(f)
        raw = _read(f, packed_len)
        dtype = np.uint8 if bits == 4 else np.int8
        packed = np.frombuffer(raw, dtype=dtype).copy()
        return name, ("quant", QuantizedTensor(bits, block, shape, scales, packed))
    raise CheckpointError(f"unknown entry kind {kind} for tensor {name!r}")


def save_checkpoint(model, path, value_head=None, meta=None):
    """Serialize a PolicyModel or QuantizedModel (plus optional value head)."""
    is_quant = isinstance(model, QuantizedModel)
    header = {
        "config": model.config.to_dict(),
        "meta": dict(meta or {}),
        "quant": {"bits": model.bits, "block_size": model.block_size} if is_quant else None,
        "has_value_head": value_head is not None,
    }
    hb = json.dumps(header).encode("utf-8")
    entries = []
    if is_quant:
        entries.extend((n, ("dense", a)) for n, a in model.named_dense_arrays())
        entries.extend((n, ("quant", q)) for n, q in model.named_quant_tensors())
    else:
        entries.extend((n, ("dense", p.data)) for n, p in model.named_params())
    if value_head is not None:
        entries.extend((n, ("dense", p.data)) for n, p in value_head.named_params())
    with open(path, "wb") as f:
        f.write(MAGIC)
        _w_u32(f, VERSION)
        _w_u32(f, len(hb))
        f.write(hb)
        _w_u32(f, len(entries))
        for name, (kind, payload) in entries:
            if kind == "dense":
                _write_dense(f, name, payload)
            else:
                _write_quant(f, name, payload)


class LoadedCheckpoint:
    def __init__(self, model, value_head, meta, config):
        self.model = model
        self.value_head = value_head
        self.meta = meta
        self.config = config


def weight_payload_bytes(path, include_value_head=False):
    """Raw tensor payload bytes in a checkpoint (names/headers excluded).

    Matches quant.memory_bytes exactly; the bench harness reconciles its
    memory column against this.
    """
    with open(path, "rb") as fh:
        f = io.BytesIO(fh.read())
    if _read(f, 4) != MAGIC:
        raise CheckpointError(f"bad magic in {path!r}")
    _r_u32(f)
    json.loads(_read(f, _r_u32(f)).decode("utf-8"))
    weights = scales = 0
    for _ in range(_r_u32(f)):
        name, (kind, payload) = _read_entry(f)
        if not include_value_head and name.startswith("value_head."):
            continue
        if kind == "dense":
            weights += payload.nbytes
        else:
            weights += payload.packed.nbytes
            scales += payload.scales.nbytes
    return {"weights_bytes": weights, "scales_bytes": scales,
            "total_bytes": weights + scales}


def load_checkpoint(path):
    with open(path, "rb") as fh:
        f = io.BytesIO(fh.read())
    if _read(f, 4) != MAGIC:
        raise CheckpointError(f"bad magic in {path!r}: not a checkpoint file")
    version = _r_u32(f)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(_read(f, _r_u32(f)).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    n_entries = _r_u32(f)
    tensors = dict(_read_entry(f) for _ in range(n_entries))

    value_head = None
    if header.get("has_value_head"):
        value_head = init_value_head(config.d_model)
        for name, p in value_head.named_params():
            kind, arr = tensors.pop(name)
            if kind != "dense" or arr.shape != p.data.shape:
                raise CheckpointError(f"value head tensor {name} malformed")
            p.data = arr.copy()

    if header.get("quant"):
        bits = header["quant"]["bits"]
        block = header["quant"]["block_size"]
        dense = {}
        quant = {}
        for name, (kind, payload) in tensors.items():
            (dense if kind == "dense" else quant)[name] = payload
        layers = []
        for li in range(config.n_layers):
            kw = {m: quant[f"layers.{li}.{m}"] for m in QUANT_MATRICES}
            kw["attn_gain"] = dense[f"layers.{li}.attn_gain"].copy()
            kw["mlp_gain"] = dense[f"layers.{li}.mlp_gain"].copy()
            layers.append(QuantLayer(**kw))
        model = QuantizedModel(config, bits, block, dense["tok_emb"].copy(),
                               dense["pos_emb"].copy(), layers,
                               dense["final_gain"].copy(), dense["w_act"].copy())
    else:
        model = init_model(config)
        for name, p in model.named_params():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            kind, arr = tensors.pop(name)
            if kind != "dense":
                raise CheckpointError(f"tensor {name} has unexpected kind")
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"tensor {name} shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.copy()
    return LoadedCheckpoint(model, value_head, header.get("meta", {}), config)
