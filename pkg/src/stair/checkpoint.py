"""Self-describing binary checkpoint container.

Layout::

    b"STAIRCKP" | uint32 format version | uint64 header length | header JSON | tensor bytes

The header is canonical JSON (sorted keys, no whitespace) listing every
tensor's name, dtype, shape and byte offset into the data block.  Tensors
are stored little-endian in C order.  Identical parameters therefore always
produce identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, ParamBank
from .residual import ResidualParams

MAGIC = b"STAIRCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    backbone: ParamBank | None = None
    residual: ResidualParams | None = None
    meta: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, backbone: ParamBank | None = None, residual: ResidualParams | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    tensors, blobs, offset = [], [], 0
    sections = {}

    def add(prefix, ps):
        nonlocal offset
        for name, arr in ps.params.items():
            a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = a.tobytes(order="C")
            tensors.append({"name": f"{prefix}/{name}", "dtype": a.dtype.str,
                            "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)

    if backbone is not None:
        sections["backbone"] = {"config": backbone.config.to_dict(), "kind": backbone.kind,
                                "groups": backbone.groups}
        add("backbone", backbone)
    if residual is not None:
        sections["residual"] = residual.meta()
        add("residual", residual)
    header = _canonical({"format_version": FORMAT_VERSION, "meta": meta or {},
                         "sections": sections, "tensors": tensors})
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays: dict[str, dict[str, np.ndarray]] = {}
    for t in header["tensors"]:
        lo = base + t["offset"]
        raw = data[lo:lo + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        section, name = t["name"].split("/", 1)
        arrays.setdefault(section, {})[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    ck = Checkpoint(meta=header.get("meta", {}))
    secs = header["sections"]
    if "backbone" in secs:
        s = secs["backbone"]
        ck.backbone = ParamBank(BackboneConfig(**s["config"]), s["kind"], arrays["backbone"])
    if "residual" in secs:
        s = secs["residual"]
        ck.residual = ResidualParams(s["C"], s["L"], s["H"], s["d_h"], s["rank"], s["scale"],
                                     arrays["residual"])
    return ck
