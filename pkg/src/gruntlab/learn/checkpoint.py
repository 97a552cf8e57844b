"""``GMDL`` model checkpoints: magic, u16 version, u32-length JSON config, u64 count, f64 LE values."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .nets import NetConfig, NetParams
from .svm import Standardizer, SvmModel

MAGIC = b"GMDL"
VERSION = 1


def encode_checkpoint(model: Union[NetParams, SvmModel], standardizer: Optional[Standardizer] = None,
                      meta: Optional[dict] = None) -> bytes:
    segments = []
    if isinstance(model, NetParams):
        header = {"kind": "net", "config": model.config.to_dict()}
        segments.append(("params", model.vector))
    elif isinstance(model, SvmModel):
        header = {"kind": "svm", "c_value": model.c_value, "bias": model.bias}
        segments.append(("weights", model.weights))
        standardizer = standardizer or model.standardizer
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    if standardizer is not None:
        segments += [("std_mean", standardizer.mean), ("std_std", standardizer.std)]
    header["segments"] = [[name, int(np.asarray(v).size)] for name, v in segments]
    header["meta"] = meta or {}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    values = np.concatenate([np.asarray(v, dtype="<f8").reshape(-1) for _, v in segments])
    return (MAGIC + struct.pack("<HI", VERSION, len(blob)) + blob
            + struct.pack("<Q", values.size) + values.astype("<f8").tobytes())


def decode_checkpoint(data: bytes) -> Tuple[Union[NetParams, SvmModel], Optional[Standardizer], dict]:
    if data[:4] != MAGIC:
        raise ValueError("not a GMDL checkpoint")
    version, n_json = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(data[pos:pos + n_json].decode("utf-8"))
    pos += n_json
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + 8 * count:
        raise ValueError("truncated checkpoint")
    values = np.frombuffer(data[pos:pos + 8 * count], dtype="<f8").astype(np.float64)
    parts, off = {}, 0
    for name, n in header["segments"]:
        parts[name] = values[off:off + n]
        off += n
    std = None
    if "std_mean" in parts:
        std = Standardizer(parts["std_mean"].copy(), parts["std_std"].copy())
    if header["kind"] == "net":
        model = NetParams(NetConfig.from_dict(header["config"]), parts["params"].copy())
    else:
        model = SvmModel(parts["weights"].copy(), header["bias"], header["c_value"], std)
    return model, std, header.get("meta", {})


def save_checkpoint(path, model, standardizer=None, meta=None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, standardizer, meta))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
