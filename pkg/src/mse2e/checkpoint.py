"""Checkpoint container for models and LMs.

Layout (little-endian)::

    b"MSE2ECKPT"  u32 version  u32 header_len  header (UTF-8 JSON)  payload

The header holds the kind ("model" or "lm"), the resolved run config text,
the training step and a tensor index ``[name, shape, byte offset]``; the
payload is the concatenated float64 tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, format_config, parse_config
from .data import FormatError
from .lm import CharLm
from .model import MultiStreamModel

MAGIC = b"MSE2ECKPT"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: RunConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    index, chunks, offset = [], [], 0
    groups = [("param", ckpt.tensors), ("opt", ckpt.optimizer)]
    for group, arrays in groups:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index.append({"group": group, "name": name, "shape": list(np.shape(arr)), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    header = json.dumps({"kind": ckpt.kind, "config": format_config(ckpt.config), "step": ckpt.step,
                         "extra": ckpt.extra, "tensors": index}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", buf, len(MAGIC))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    payload = buf[start + hlen:]
    out = {"param": {}, "opt": {}}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 8 * n
        if end > len(payload):
            raise FormatError(f"{path}: tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        out[entry["group"]][entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    cfg = parse_config(header["config"], f"{path}:config")
    return Checkpoint(header["kind"], cfg, out["param"], header["step"], out["opt"], header.get("extra", {}))


def model_checkpoint(model: MultiStreamModel, cfg: RunConfig, step: int = 0, optimizer=None,
                     extra: dict | None = None) -> Checkpoint:
    tensors = {name: p.data for name, p in model.named_parameters()}
    tensors["unigram"] = model.unigram
    opt = optimizer.state_arrays() if optimizer is not None else {}
    return Checkpoint("model", cfg, tensors, step, opt, extra or {})


def _load_params(module, tensors: dict[str, np.ndarray], path) -> None:
    for name, p in module.named_parameters():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise FormatError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {p.data.shape}")
        p.data[...] = tensors[name]


def load_model(path: str | Path) -> tuple[MultiStreamModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "model":
        raise FormatError(f"{path}: expected a model checkpoint, found {ckpt.kind!r}")
    model = MultiStreamModel(ckpt.config.model_config())
    _load_params(model, ckpt.tensors, path)
    if "unigram" in ckpt.tensors:
        model.unigram = ckpt.tensors["unigram"].copy()
    return model, ckpt


def lm_checkpoint(lm: CharLm, cfg: RunConfig, extra: dict | None = None) -> Checkpoint:
    return Checkpoint("lm", cfg, {name: p.data for name, p in lm.named_parameters()}, 0, {}, extra or {})


def load_lm(path: str | Path) -> CharLm:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "lm":
        raise FormatError(f"{path}: expected an LM checkpoint, found {ckpt.kind!r}")
    lm = CharLm(ckpt.config.lm_config())
    _load_params(lm, ckpt.tensors, path)
    return lm
