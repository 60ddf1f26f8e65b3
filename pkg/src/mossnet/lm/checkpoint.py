"""Binary checkpoint files.

Layout: ``b"MOSS"``, u16 format version, u32 length + UTF-8 JSON header
(config without ``out_dir``, step, RNG state), then one record per tensor until
EOF: u16 path length, path bytes, tensor bytes in the numerics serialization.
All integers little-endian.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractError
from ..numerics import Tensor, tensor_from_bytes, tensor_to_bytes
from .config import RunConfig
from .model import MossNetLM, param_plan

MAGIC = b"MOSS"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    tensors: dict        # canonical path -> ndarray
    rng_state: dict | None = None

    @classmethod
    def from_model(cls, model: MossNetLM, cfg: RunConfig, step: int, rng_state: dict | None = None):
        return cls(cfg, step, {p: t.data for p, t in model.params.items()}, rng_state)

    def model(self) -> MossNetLM:
        mcfg = self.config.model_config()
        order = [spec.path for spec in param_plan(mcfg)]
        expected = set(order)
        if expected != set(self.tensors):
            missing = sorted(expected - set(self.tensors))[:3]
            extra = sorted(set(self.tensors) - expected)[:3]
            raise ContractError(f"checkpoint tensors do not match config (missing {missing}, extra {extra})")
        params = {p: Tensor(np.array(self.tensors[p]), requires_grad=True, name=p) for p in order}
        return MossNetLM(mcfg, params)


# where a run wrote its files is not part of what it computed
NOT_STORED = ("out_dir",)


def config_to_json(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name in NOT_STORED:
            continue
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_json(d: dict) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - names
    if unknown:
        raise ContractError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return RunConfig(**kw)


def to_bytes(ck: Checkpoint) -> bytes:
    header = json.dumps({"config": config_to_json(ck.config), "step": int(ck.step),
                         "rng_state": ck.rng_state}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header]
    for path in sorted(ck.tensors):
        name = path.encode("utf-8")
        parts += [struct.pack("<H", len(name)), name, tensor_to_bytes(ck.tensors[path])]
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", buf, 6)
    header = json.loads(buf[10:10 + n].decode("utf-8"))
    off = 10 + n
    tensors = {}
    while off < len(buf):
        (ln,) = struct.unpack_from("<H", buf, off)
        path = buf[off + 2:off + 2 + ln].decode("utf-8")
        t, off = tensor_from_bytes(buf, off + 2 + ln)
        tensors[path] = t.data
    return Checkpoint(config_from_json(header["config"]), header["step"], tensors, header["rng_state"])


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
