"""Versioned binary model file and the key=value run configuration.

Model file layout (all integers little-endian)::

    magic       8 bytes  b"OANADE01"
    version     u32      FORMAT_VERSION
    meta_len    u32      length of the metadata block
    metadata    utf-8 JSON, sorted keys, no whitespace (model config, provenance, data stats)
    n_tensors   u32
    directory   per tensor: u16 name_len, name (utf-8), u8 ndim, u64 dims[ndim],
                u64 offset (bytes from payload start), u64 count (number of values)
    payload     float64 little-endian values, row-major, tensors back to back
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .data import atomic_write
from .model import ModelConfig, Parameters

MAGIC = b"OANADE01"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def dumps_model(params: Parameters, metadata=None) -> bytes:
    meta = dict(metadata or {})
    meta["model"] = params.config.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    directory, payload, offset = [], [], 0
    for name, t in params.items():
        nb = name.encode("utf-8")
        entry = struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim)
        entry += struct.pack(f"<{t.ndim}Q", *t.shape)
        entry += struct.pack("<QQ", offset, t.size)
        directory.append(entry)
        payload.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
        offset += 8 * t.size
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta_bytes)) + meta_bytes
    return head + struct.pack("<I", len(directory)) + b"".join(directory) + b"".join(payload)


def loads_model(blob: bytes):
    """Returns (Parameters, metadata dict)."""
    if blob[:8] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    pos = 8
    try:
        version, meta_len = struct.unpack_from("<II", blob, pos)
        if version != FORMAT_VERSION:
            raise ModelFileError(f"unsupported model file version {version}")
        pos += 8
        if pos + meta_len > len(blob):
            raise ModelFileError("truncated model file: metadata extends past the end")
        try:
            meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ModelFileError(f"corrupt metadata: {e}") from None
        pos += meta_len
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        entries = []
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            offset, count = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            entries.append((name, shape, offset, count))
    except struct.error as e:
        raise ModelFileError(f"truncated model file: {e}") from None
    payload = blob[pos:]
    tensors, spans = {}, []
    for name, shape, offset, count in entries:
        if int(np.prod(shape)) != count:
            raise ModelFileError(f"tensor {name}: shape {shape} does not hold {count} values")
        end = offset + 8 * count
        if end > len(payload):
            raise ModelFileError(f"tensor {name} extends past the end of the payload")
        spans.append((offset, end, name))
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ModelFileError(f"tensors {n0} and {n1} overlap")
    try:
        config = ModelConfig.from_dict(meta["model"])
        return Parameters(config, tensors), meta
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"model file does not match its configuration: {e}") from None


def save_model(path, params: Parameters, metadata=None):
    atomic_write(path, dumps_model(params, metadata))


def load_model(path):
    with open(path, "rb") as f:
        return loads_model(f.read())


# -- run configuration -------------------------------------------------------

def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _shape(s):
    if not s.strip():
        return None
    return tuple(int(v) for v in s.lower().split("x"))


# key -> (parser, default, description)
RUN_KEYS = {
    "train_path": (str, "", "training data matrix (required for train)"),
    "valid_path": (str, "", "validation data matrix; empty = carve valid_fraction off the training data"),
    "valid_fraction": (float, 0.1, "fraction of training rows held out when valid_path is empty"),
    "data_kind": (str, "binary", "binary or real"),
    "delimiter": (str, "", "column delimiter; empty = whitespace or comma"),
    "standardize": (_bool, False, "standardise real data with training-set mean/std"),
    "image_shape": (_shape, None, "e.g. 28x28, enables image outputs"),
    "D": (int, 0, "input dimension; 0 = infer from the training data"),
    "hidden_sizes": (_ints, (500,), "comma-separated hidden layer widths"),
    "activation": (str, "relu", "relu or sigmoid"),
    "head": (str, "binary", "binary or mog"),
    "components": (int, 10, "mixture components for the mog head"),
    "input_masks": (_bool, True, "append the mask vector to the inputs"),
    "iterations": (int, 100, "training iterations"),
    "updates_per_iteration": (int, 1000, "parameter updates per iteration"),
    "minibatch_size": (int, 100, "examples per update"),
    "initial_lr": (float, 0.001, "learning rate at the first update, decays linearly to 0"),
    "momentum": (float, 0.9, "Nesterov momentum"),
    "weight_decay": (float, 0.0, "L2 penalty on weight matrices"),
    "pretrain": (_bool, True, "layerwise pretraining for nets with more than one hidden layer"),
    "pretrain_iterations": (int, 20, "iterations per pretraining level"),
    "early_stop": (_bool, True, "keep the snapshot with the best validation loss"),
    "seed": (int, 1234, "seed for initialisation, minibatches and contexts"),
}


class ConfigError(ValueError):
    pass


def parse_run_config(text, require_data=True):
    cfg = {k: v[1] for k, v in RUN_KEYS.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        try:
            cfg[key] = RUN_KEYS[key][0](value)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    if require_data and not cfg["train_path"]:
        raise ConfigError("train_path is required")
    if not cfg["train_path"] and not cfg["D"]:
        raise ConfigError("either train_path or D must be given")
    return cfg


def load_run_config(path, require_data=True):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    cfg = parse_run_config(text, require_data)
    base = os.path.dirname(os.path.abspath(path))
    for key in ("train_path", "valid_path"):
        if cfg[key] and not os.path.isabs(cfg[key]):
            cfg[key] = os.path.join(base, cfg[key])
    return cfg
