"""Binary checkpoints: magic "KAC1", JSON header, raw little-endian blobs.

Layout:
    bytes 0..3    magic b"KAC1"
    bytes 4..7    format version, uint32 LE
    bytes 8..15   header length, uint64 LE
    header        UTF-8 JSON: tensor directory (name/shape/dtype/offset/
                  length), encoder config, class counts, config hash,
                  RNG state, run state
    blobs         raw tensor bytes, little-endian, in directory order

Loading reproduces every tensor bit-for-bit and the RNG state exactly.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError
from .network import EncoderConfig, ModelBundle
from .tensor import Tensor
from .utils import config_hash

MAGIC = b"KAC1"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class RunState:
    cycle: int = 0       # t
    iteration: int = 0   # i
    adaptation: int = 0  # j
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"cycle": self.cycle, "iteration": self.iteration,
                "adaptation": self.adaptation, "rng_state": self.rng_state,
                "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "RunState":
        return cls(cycle=d.get("cycle", 0), iteration=d.get("iteration", 0),
                   adaptation=d.get("adaptation", 0), rng_state=d.get("rng_state"),
                   extra=d.get("extra", {}))


def _jsonable_rng(state):
    if state is None:
        return None
    def convert(v):
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v
    return convert(state)


def _restore_rng(state):
    if state is None:
        return None
    def convert(v):
        if isinstance(v, dict):
            if "__ndarray__" in v:
                return np.array(v["__ndarray__"], dtype=v["dtype"])
            return {k: convert(x) for k, x in v.items()}
        return v
    return convert(state)


def save_checkpoint(bundle: ModelBundle, run_state: RunState, path,
                    config_dict: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    blobs = []
    offset = 0
    named = [(name, t) for name, t in bundle.params.items()]
    named += [(f"teacher.{name}", t) for name, t in bundle.teacher.items()]
    for name, t in named:
        dtype = str(t.data.dtype)
        if dtype not in _DTYPES:
            raise FormatError(f"unsupported tensor dtype {dtype}")
        blob = np.ascontiguousarray(t.data).astype(_DTYPES[dtype]).tobytes()
        directory.append({"name": name, "shape": list(t.data.shape),
                          "dtype": dtype, "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder": bundle.config.to_dict(),
        "class_counts": list(bundle.class_counts),
        "config_hash": config_hash(config_dict) if config_dict is not None else None,
        "run_state": run_state.to_dict() | {"rng_state": _jsonable_rng(run_state.rng_state)},
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path, expect_config: dict | None = None
                    ) -> tuple[ModelBundle, RunState]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic or truncated)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + header_len:
        raise FormatError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} header is not valid JSON: {exc}") from exc
    body = raw[16 + header_len:]

    if expect_config is not None and header.get("config_hash") is not None:
        if config_hash(expect_config) != header["config_hash"]:
            warnings.warn("checkpoint config hash differs from the expected config; "
                          "loading anyway")

    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, length = entry["offset"], entry["length"]
        if start + length > len(body):
            raise FormatError(f"{path} is truncated inside tensor '{entry['name']}'")
        arr = np.frombuffer(body[start:start + length],
                            dtype=_DTYPES[entry["dtype"]]).astype(entry["dtype"])
        tensors[entry["name"]] = arr.reshape(entry["shape"])

    config = EncoderConfig.from_dict(header["encoder"])
    class_counts = tuple(header["class_counts"])
    params = {}
    teacher = {}
    for name, arr in tensors.items():
        if name.startswith("teacher."):
            short = name[len("teacher."):]
            teacher[short] = Tensor(arr.copy(), name=short, dtype=arr.dtype)
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name,
                                  dtype=arr.dtype)
    bundle = ModelBundle(config, class_counts, params, teacher)
    rs = header["run_state"]
    run_state = RunState.from_dict(rs)
    run_state.rng_state = _restore_rng(rs.get("rng_state"))
    return bundle, run_state
