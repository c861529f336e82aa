"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DANC" | u16 version | u16 0 | u32 n | config text (n bytes, UTF-8)
    | 16 ASCII bytes config hash | u32 n | JSON state (n bytes)
    | u32 blob count | per blob: u16 n, name, u8 ndim, ndim x u32, float64 payload
    | 8-byte blake2b digest of everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..archspace import LayerMask, extract_subnet
from ..diffcore import AdamW
from ..diffcore.rng import RngStreams
from ..trainer import Trainer, TrainState

MAGIC = b"DANC"
VERSION = 1
DIGEST = 8


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ConfigMismatchWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    config_text: str = ""
    config_hash: str = "0" * 16
    state: dict = field(default_factory=dict)
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return int(self.state.get("train_state", {}).get("stage", 0))


def _digest(raw: bytes) -> bytes:
    return hashlib.blake2b(raw, digest_size=DIGEST).digest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    h = ckpt.config_hash.encode("ascii")
    if len(h) != 16:
        raise CheckpointError(f"config hash must be 16 hex characters, got {ckpt.config_hash!r}")
    cfg = ckpt.config_text.encode("utf-8")
    st = json.dumps(ckpt.state, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HH", VERSION, 0), struct.pack("<I", len(cfg)), cfg, h,
             struct.pack("<I", len(st)), st, struct.pack("<I", len(ckpt.blobs))]
    for name, arr in ckpt.blobs.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    body = b"".join(parts)
    return body + _digest(body)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"unexpected end of data at offset {self.pos} (wanted {n} bytes)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + DIGEST or raw[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic or file too short")
    body, digest = raw[:-DIGEST], raw[-DIGEST:]
    if _digest(body) != digest:
        raise CorruptCheckpointError("checksum mismatch: file is truncated or corrupted")
    r = _Reader(body)
    r.take(4)
    version, _ = r.unpack("<HH")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    cfg = r.take(n).decode("utf-8")
    h = r.take(16).decode("ascii")
    (n,) = r.unpack("<I")
    state = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CorruptCheckpointError(f"{len(body) - r.pos} trailing bytes after the last blob")
    return Checkpoint(cfg, h, state, blobs)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    ckpt = from_bytes(raw)
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        msg = f"checkpoint {path} was written with config {ckpt.config_hash}, current config is {expected_hash}"
        warnings.warn(msg, ConfigMismatchWarning, stacklevel=2)
        if not force:
            raise ConfigMismatchError(msg + " (use --force to load anyway)")
    return ckpt


# trainer <-> checkpoint ------------------------------------------------------------

def _param_blobs(prefix: str, params, blobs: dict, steps: dict) -> None:
    for p in params:
        key = prefix + p.name
        blobs[key] = p.data
        blobs[key + "#m"] = p.m
        blobs[key + "#v"] = p.v
        steps[key] = p.step


def _load_params(prefix: str, params, ckpt: Checkpoint) -> None:
    steps = ckpt.state["param_steps"]
    for p in params:
        key = prefix + p.name
        try:
            data, m, v = ckpt.blobs[key], ckpt.blobs[key + "#m"], ckpt.blobs[key + "#v"]
        except KeyError:
            raise CheckpointError(f"checkpoint has no parameter {key!r}") from None
        if data.shape != p.data.shape:
            raise CheckpointError(f"parameter {key!r}: stored shape {data.shape} != model shape {p.data.shape}")
        p.data = data.copy()
        p.m = m.copy()
        p.v = v.copy()
        p.step = int(steps[key])
        p.grad = None


def capture(trainer: Trainer, config_text: str = "", config_hash: str = "0" * 16) -> Checkpoint:
    blobs: dict[str, np.ndarray] = {}
    steps: dict[str, int] = {}
    _param_blobs("", trainer.model.parameters(), blobs, steps)
    states = []
    for s in trainer.model.states:
        blobs[f"score{s.layer}.dynamic"] = s.dynamic
        blobs[f"score{s.layer}.feature"] = s.feature
        for i, a in enumerate(s.buffer):
            blobs[f"score{s.layer}.buffer{i}"] = a
        states.append({"layer": s.layer, "t": s.t, "errors": s.errors, "buffer_len": len(s.buffer),
                       "buffer_max": s.buffer.maxlen, "last_dynamic_change": s.last_dynamic_change,
                       "last_feature_change": s.last_feature_change})
    sub = None
    if trainer.subnet is not None:
        _param_blobs("subnet/", trainer.subnet.parameters(), blobs, steps)
        sub = {"masks": [[m.layer, m.width, m.to_hex()] for m in trainer.subnet.masks],
               "provenance": trainer.subnet.provenance}
    opts = {}
    for name, opt in trainer.optimizers.items():
        prefix = "subnet/" if name == "subnet" else ""
        opts[name] = {"t": opt.t, "skipped": opt.skipped, "lr": opt.lr,
                      "total_steps": opt.schedule.total_steps if opt.schedule else 1,
                      "params": [prefix + p.name for p in opt.params]}
    ts = asdict(trainer.state)
    state = {
        "seed": trainer.seed,
        "run_id": trainer.run_id,
        "stage": trainer.state.stage,
        "train_state": ts,
        "rng": trainer.rngs.get_state(),
        "optimizers": opts,
        "param_steps": steps,
        "importance": states,
        "subnet": sub,
        "warnings": list(trainer.warnings),
    }
    return Checkpoint(config_text, config_hash, state, blobs)


def restore(trainer: Trainer, ckpt: Checkpoint) -> Trainer:
    """Load a checkpoint into a trainer built from the same config, data and seed."""
    st = ckpt.state
    _load_params("", trainer.model.parameters(), ckpt)
    for s, info in zip(trainer.model.states, st["importance"]):
        s.dynamic = ckpt.blobs[f"score{s.layer}.dynamic"].copy()
        s.feature = ckpt.blobs[f"score{s.layer}.feature"].copy()
        s.buffer = deque((ckpt.blobs[f"score{s.layer}.buffer{i}"].copy() for i in range(info["buffer_len"])),
                         maxlen=info["buffer_max"])
        s.t, s.errors = info["t"], info["errors"]
        s.last_dynamic_change = info["last_dynamic_change"]
        s.last_feature_change = info["last_feature_change"]
    trainer.subnet = None
    if st.get("subnet"):
        masks = [LayerMask.from_hex(l, w, h) for l, w, h in st["subnet"]["masks"]]
        sub = extract_subnet(trainer.model.net, masks, st["subnet"]["provenance"])
        _load_params("subnet/", sub.parameters(), ckpt)
        trainer.subnet = sub
    trainer.rngs = RngStreams.from_state(st["rng"])
    trainer.state = TrainState(**st["train_state"])
    trainer.warnings = list(st.get("warnings", []))
    by_name = {p.name: p for p in trainer.model.parameters()}
    if trainer.subnet is not None:
        by_name.update({"subnet/" + p.name: p for p in trainer.subnet.parameters()})
    tc = trainer.tc
    trainer.optimizers = {}
    for name, o in st["optimizers"].items():
        params = [by_name[n] for n in o["params"]]
        opt = AdamW(params, o["lr"], o["total_steps"], tc.weight_decay, tc.betas, tc.eps, tc.warmup_frac)
        opt.t, opt.skipped = o["t"], o["skipped"]
        trainer.optimizers[name] = opt
    return trainer


def save_trainer(trainer: Trainer, path: str | Path, config_text: str = "", config_hash: str = "0" * 16) -> Path:
    return save_checkpoint(capture(trainer, config_text, config_hash), path)
