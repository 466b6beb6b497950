"""Versioned binary checkpoint: header JSON + named little-endian tensors.

Layout::

    b"ERGLCKPT" | u16 version | u32 header length | header (UTF-8 JSON) | payload

The header holds the config snapshot, the event vocabulary, the scene label
names and an index of tensors ``{name, dtype, shape, offset, nbytes}``.
Parameters, running norm statistics and (optionally) optimiser moments are
stored in the payload.  Every field is deterministic, so saving the same
state twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CheckpointError
from .model import ERGLNet
from .ranking import EventVocabulary
from .training import TrainConfig

MAGIC = b"ERGLCKPT"
VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8"}


@dataclass
class Checkpoint:
    config: TrainConfig
    vocabulary: EventVocabulary
    tensors: dict                       # "param:..."/"buffer:..." -> ndarray
    scene_labels: list = field(default_factory=list)
    optimizer: dict | None = None       # {"step": int, "m": {...}, "v": {...}}
    extra: dict = field(default_factory=dict)

    def build_model(self):
        model = ERGLNet(self.config.model_config(), seed=self.config.seed)
        dtype = next(iter(self.tensors.values())).dtype if self.tensors else np.float32
        model.astype(dtype)
        model.load_state_dict(self.tensors)
        return model.eval()

    @classmethod
    def from_model(cls, model, config, vocabulary, scene_labels=(), optimizer=None, extra=None):
        opt = None
        if optimizer is not None:
            names = [k for k, _ in model.named_parameters()]
            opt = {"step": optimizer.step_count,
                   "m": dict(zip(names, optimizer.m)), "v": dict(zip(names, optimizer.v))}
        return cls(config, vocabulary, {k: np.array(v) for k, v in model.state_dict().items()},
                   list(scene_labels), opt, dict(extra or {}))


def _dtype_code(arr):
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def to_bytes(ckpt):
    entries = list(sorted(ckpt.tensors.items()))
    if ckpt.optimizer is not None:
        for kind in ("m", "v"):
            entries += [(f"optim.{kind}:{k}", v) for k, v in sorted(ckpt.optimizer[kind].items())]
    index, chunks, offset = [], [], 0
    for name, arr in entries:
        code = _dtype_code(np.asarray(arr))
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(np.shape(arr)),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "vocabulary": ckpt.vocabulary.to_json(),
        "scene_labels": list(ckpt.scene_labels),
        "optimizer_step": None if ckpt.optimizer is None else int(ckpt.optimizer["step"]),
        "extra": ckpt.extra,
        "tensors": index,
        "payload_bytes": offset,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(hb)) + hb + b"".join(chunks)


def from_bytes(blob, source="<bytes>"):
    fixed = len(MAGIC) + struct.calcsize("<HI")
    if len(blob) < fixed:
        raise CheckpointError(f"{source}: truncated ({len(blob)} bytes, header needs {fixed})")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<HI", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version} (this build reads {VERSION})")
    if len(blob) < fixed + hlen:
        raise CheckpointError(f"{source}: truncated inside header")
    try:
        header = json.loads(blob[fixed:fixed + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    payload = blob[fixed + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{source}: payload is {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    tensors, optim = {}, {"m": {}, "v": {}}
    for ent in header["tensors"]:
        arr = np.frombuffer(payload, dtype=_DTYPES[ent["dtype"]], count=int(np.prod(ent["shape"], dtype=np.int64)),
                            offset=ent["offset"]).reshape(ent["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        name = ent["name"]
        if name.startswith("optim."):
            kind, key = name[len("optim."):].split(":", 1)
            optim[kind][key] = arr
        else:
            tensors[name] = arr
    opt = None
    if header["optimizer_step"] is not None:
        opt = {"step": header["optimizer_step"], **optim}
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        vocabulary=EventVocabulary.from_json(header["vocabulary"]),
        tensors=tensors,
        scene_labels=header["scene_labels"],
        optimizer=opt,
        extra=header.get("extra", {}),
    )


def save(ckpt, path):
    """Atomic write (temp file + rename) so readers never see a partial file."""
    blob = to_bytes(ckpt)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return from_bytes(blob, str(path))
