"""Binary checkpoints of a network and its Adam state.

Layout (little-endian)::

    magic        8 bytes   b"GAITCKPT"
    version      u32
    meta_len     u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    n_tensors    u32
    per tensor:  name_len u16, name (UTF-8), ndim u8, dims u64 * ndim,
                 raw float64 values (row-major)
    checksum     u32 CRC-32 of every preceding byte
"""

import json
import struct
import zlib

import numpy as np

from .credit import OptimizerState
from .errors import CheckpointError
from .layers import ConvLayer, DenseLayer, Network

MAGIC = b"GAITCKPT"
VERSION = 1


def _layer_meta(layer):
    meta = {"kind": layer.kind, "slope": layer.slope, "in_shape": list(layer.in_shape)}
    if layer.kind == "dense":
        meta["forward_units"] = layer.forward_units
    else:
        meta["stride"] = layer.stride
        meta["forward_channels"] = layer.forward_channels
    return meta


def _tensors(net, opt_state):
    out = []
    for l, layer in enumerate(net.layers):
        for name, p in layer.params().items():
            out.append((f"layer{l}.{name}", p))
    if opt_state is not None:
        for which, acc in (("m", opt_state.m), ("v", opt_state.v)):
            for l, layer_acc in enumerate(acc):
                for name, p in layer_acc.items():
                    out.append((f"adam.{which}.layer{l}.{name}", p))
    return out


def encode(net, opt_state=None, extra=None):
    meta = {
        "input_shape": list(net.input_shape),
        "dtype": np.dtype(net.dtype).name,
        "layers": [_layer_meta(layer) for layer in net.layers],
        "extra": extra or {},
    }
    if opt_state is not None:
        meta["optimizer"] = {
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "step": opt_state.step,
        }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = _tensors(net, opt_state)
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(net, opt_state, path, extra=None):
    data = encode(net, opt_state, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"corrupt checkpoint: truncated at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data):
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError("corrupt checkpoint: file too short")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}Q")
        count = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError(f"corrupt checkpoint: {len(body) - r.pos} unexpected trailing bytes")
    return meta, tensors


def checkpoint_load(path):
    """Return ``(net, opt_state, extra)``; ``opt_state`` is None if not saved."""
    with open(path, "rb") as fh:
        data = fh.read()
    meta, tensors = decode(data)
    dtype = np.dtype(meta["dtype"])
    layers = []
    try:
        for l, lm in enumerate(meta["layers"]):
            W = tensors[f"layer{l}.W"].astype(dtype)
            b = tensors[f"layer{l}.b"].astype(dtype)
            if lm["kind"] == "dense":
                layers.append(DenseLayer(W, b, lm["slope"], lm["forward_units"], lm["in_shape"]))
            else:
                layers.append(
                    ConvLayer(W, b, lm["stride"], lm["slope"], lm["forward_channels"], lm["in_shape"])
                )
    except KeyError as exc:
        raise CheckpointError(f"corrupt checkpoint: missing tensor {exc}") from None
    net = Network(layers, meta["input_shape"])
    opt_state = None
    if "optimizer" in meta:
        om = meta["optimizer"]
        try:
            m, v = (
                [{k: tensors[f"adam.{which}.layer{l}.{k}"].astype(dtype) for k in ("W", "b")} for l in range(len(layers))]
                for which in ("m", "v")
            )
        except KeyError as exc:
            raise CheckpointError(f"corrupt checkpoint: missing tensor {exc}") from None
        opt_state = OptimizerState(m, v, lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"], step=om["step"])
    return net, opt_state, meta.get("extra", {})
