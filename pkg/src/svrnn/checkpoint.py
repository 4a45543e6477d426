"""Binary checkpoints: a JSON manifest plus named float64 arrays.

Layout (all integers little-endian):

    bytes 0..7    magic b"SVRNNCKP"
    u32           format version (currently 1)
    u64           manifest length, then that many bytes of UTF-8 JSON
    u64           array count
    per array:    u16 name length, name bytes,
                  u8 ndim, ndim x u64 shape,
                  little-endian float64 data, row-major

Arrays are written sorted by name and floats byte-for-byte, so saving a
loaded checkpoint reproduces the file exactly.  The manifest stores the model
spec, a hash of its canonical JSON (checked on load), training counters and
optimizer configuration.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, spec_hash

MAGIC = b"SVRNNCKP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict                      # name -> float64 array
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_step: int = 0
    epoch: int = 0
    global_step: int = 0
    optimizer: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "spec_hash": spec_hash(self.spec),
            "opt_step": self.opt_step,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "optimizer": self.optimizer,
        }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {}
    for name, arr in ckpt.params.items():
        arrays[f"param/{name}"] = arr
    for name, arr in ckpt.opt_m.items():
        arrays[f"adam_m/{name}"] = arr
    for name, arr in ckpt.opt_v.items():
        arrays[f"adam_v/{name}"] = arr
    manifest = json.dumps(ckpt.manifest(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(struct.pack("<Q", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


def _read(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        (mlen,) = struct.unpack("<Q", _read(fh, 8, "manifest length"))
        try:
            manifest = json.loads(_read(fh, mlen, "manifest").decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise CheckpointError(f"corrupt manifest: {e}") from None
        spec = ModelSpec.from_dict(manifest["spec"])
        if manifest.get("spec_hash") != spec_hash(spec):
            raise CheckpointError("manifest spec hash does not match the stored spec")
        if expected_spec is not None and spec_hash(expected_spec) != spec_hash(spec):
            raise CheckpointError("checkpoint was saved for a different model spec")
        (count,) = struct.unpack("<Q", _read(fh, 8, "array count"))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1, "ndim"))
            shape = tuple(struct.unpack("<Q", _read(fh, 8, "shape"))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read(fh, 8 * size, f"array '{name}'"), dtype="<f8")
            arrays[name] = data.reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    params, opt_m, opt_v = {}, {}, {}
    for name, arr in arrays.items():
        kind, _, rest = name.partition("/")
        {"param": params, "adam_m": opt_m, "adam_v": opt_v}[kind][rest] = arr
    return Checkpoint(
        spec=spec,
        params=params,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_step=int(manifest.get("opt_step", 0)),
        epoch=int(manifest.get("epoch", 0)),
        global_step=int(manifest.get("global_step", 0)),
        optimizer=manifest.get("optimizer", {}),
    )
