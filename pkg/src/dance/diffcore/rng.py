"""Named, counter-based random streams.

Every consumer (init, data, shuffling, gate noise, sampling, ...) draws from its
own Philox stream keyed by ``(seed, hash(name))``, so adding a consumer never
shifts the draws seen by another one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

ALGORITHM = "philox4x64-10"
_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class RngState:
    seed: int
    stream: str
    algorithm: str = ALGORITHM

    def generator(self) -> np.random.Generator:
        key = (self.seed & _MASK64) | (stream_id(self.stream) << 64)
        return np.random.Generator(np.random.Philox(key=key))


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """Inverse CDF of the standard Gumbel: -ln(-ln u)."""
    return -np.log(-np.log(u))


def uniform_open(gen: np.random.Generator, size) -> np.ndarray:
    tiny = np.finfo(np.float64).tiny
    return np.clip(gen.random(size), tiny, 1.0 - np.finfo(np.float64).epsneg)


def gumbel(gen: np.random.Generator, size) -> np.ndarray:
    return gumbel_from_uniform(uniform_open(gen, size))


class RngStreams:
    """Lazily created generators, one per consumer name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._gens.get(name)
        if gen is None:
            gen = RngState(self.seed, name).generator()
            self._gens[name] = gen
        return gen

    def get_state(self) -> dict:
        out = {}
        for name, gen in sorted(self._gens.items()):
            st = gen.bit_generator.state
            out[name] = {
                "counter": [int(x) for x in st["state"]["counter"]],
                "key": [int(x) for x in st["state"]["key"]],
                "buffer": [int(x) for x in st["buffer"]],
                "buffer_pos": int(st["buffer_pos"]),
                "has_uint32": int(st["has_uint32"]),
                "uinteger": int(st["uinteger"]),
            }
        return {"seed": self.seed, "algorithm": ALGORITHM, "streams": out}

    @classmethod
    def from_state(cls, state: dict) -> "RngStreams":
        streams = cls(state["seed"])
        for name, st in state["streams"].items():
            gen = RngState(streams.seed, name).generator()
            gen.bit_generator.state = {
                "bit_generator": "Philox",
                "state": {"counter": np.array(st["counter"], dtype=np.uint64),
                          "key": np.array(st["key"], dtype=np.uint64)},
                "buffer": np.array(st["buffer"], dtype=np.uint64),
                "buffer_pos": st["buffer_pos"],
                "has_uint32": st["has_uint32"],
                "uinteger": st["uinteger"],
            }
            streams._gens[name] = gen
        return streams
