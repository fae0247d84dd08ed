"""Self-describing weight container.

Layout: magic "NCNW" (4B) | version u16 | meta_len u32 | canonical JSON
meta | raw array bytes. The meta block records architecture
hyperparameters, loss kind, lambda values, training metadata, and an
index {array name -> dtype, shape, offset} into the raw block. Arrays
are stored in sorted-name order and the JSON is canonical, so writing
the same content always yields the same bytes.

The optional latent-masking section lives under the "lsm_head." /
"lsm_backbone." array prefixes plus a "lsm" meta entry; its absence
means masking is disabled. Optimizer state ("opt." prefix) may ride
along in training checkpoints and is ignored by the codec loader.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .analysis import ToyBackbone
from .errors import BitstreamError
from .model import NcnModel

MAGIC = b"NCNW"
VERSION = 1
_HEAD = struct.Struct("<4sHI")

LOSS_KINDS = ("hvs", "task", "feature")


def write_container(arrays, meta):
    meta = dict(meta)
    index = {}
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        index[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": len(blob),
        }
        blob += arr.tobytes()
    meta["arrays"] = index
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return _HEAD.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + bytes(blob)


def read_container(data):
    if len(data) < _HEAD.size:
        raise BitstreamError("checkpoint too short for header")
    magic, version, meta_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported checkpoint version {version}")
    meta_end = _HEAD.size + meta_len
    if len(data) < meta_end:
        raise BitstreamError("checkpoint meta truncated")
    meta = json.loads(data[_HEAD.size : meta_end])
    blob = data[meta_end:]
    arrays = {}
    for name, entry in meta.pop("arrays", {}).items():
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise BitstreamError(f"array {name!r} truncated")
        arrays[name] = np.frombuffer(blob[start:end], dtype=dtype).reshape(entry["shape"]).copy()
    return arrays, meta


def _module_arrays(module, prefix):
    return {
        prefix + name: tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def _load_module(module, arrays, prefix):
    state = {}
    for name, arr in arrays.items():
        if name.startswith(prefix):
            state[name[len(prefix) :]] = torch.from_numpy(arr)
    module.load_state_dict(state)
    return module


@dataclass
class LoadedCheckpoint:
    model: NcnModel
    meta: dict
    lsm_head: object = None
    lsm_backbone: object = None
    extra_arrays: dict = None


def save_model_file(path, model, meta, lsm_head=None, lsm_backbone=None, extra_arrays=None):
    """Write a checkpoint; see module docstring for the layout."""
    meta = dict(meta)
    if meta.get("loss_kind") not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {meta.get('loss_kind')!r}")
    meta["arch"] = model.arch
    arrays = _module_arrays(model, "model.")
    if (lsm_head is None) != (lsm_backbone is None):
        raise ValueError("masking section needs both the head and its backbone")
    if lsm_head is not None:
        arrays.update(_module_arrays(lsm_head, "lsm_head."))
        arrays.update(_module_arrays(lsm_backbone, "lsm_backbone."))
        meta["lsm"] = {
            "stage": meta.get("lsm", {}).get("stage", "s16"),
            "feature_channels": int(lsm_head.proj.weight.shape[1]),
            "backbone": {
                "type": "toy",
                "channels": list(lsm_backbone.channels),
                "pyramid_channels": lsm_backbone.pyramid_channels,
            },
        }
    else:
        meta.pop("lsm", None)
    if extra_arrays:
        arrays.update(extra_arrays)
    data = write_container(arrays, meta)
    with open(path, "wb") as f:
        f.write(data)
    return data


def load_model_file(path):
    with open(path, "rb") as f:
        data = f.read()
    return load_model_bytes(data)


def load_model_bytes(data):
    from .masking import LsmHead  # local import: masking depends on codec

    arrays, meta = read_container(data)
    model = NcnModel(**meta["arch"])
    _load_module(model, arrays, "model.")
    model.eval()
    lsm_head = lsm_backbone = None
    if "lsm" in meta:
        section = meta["lsm"]
        lsm_backbone = ToyBackbone(
            channels=tuple(section["backbone"]["channels"]),
            pyramid_channels=section["backbone"]["pyramid_channels"],
        )
        _load_module(lsm_backbone, arrays, "lsm_backbone.")
        lsm_backbone.eval()
        lsm_head = LsmHead(section["feature_channels"], model.latent_channels)
        _load_module(lsm_head, arrays, "lsm_head.")
        lsm_head.eval()
    extra = {
        name: arr
        for name, arr in arrays.items()
        if not name.startswith(("model.", "lsm_head.", "lsm_backbone."))
    }
    return LoadedCheckpoint(
        model=model, meta=meta, lsm_head=lsm_head, lsm_backbone=lsm_backbone, extra_arrays=extra
    )
