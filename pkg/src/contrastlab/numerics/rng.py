"""Named, splittable random streams on top of numpy's counter-based Philox.

A stream is identified by ``(seed, path)``. Its Philox key is the first 16
bytes of ``sha256(f"{seed}/{path}")`` read as a little-endian integer and the
counter starts at zero, so any child stream can be rebuilt from its name
alone. Children never share state with their parent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, path: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{path}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed)
        self.path = path
        self.generator = np.random.Generator(np.random.Philox(key=derive_key(self.seed, path)))

    def split(self, *names) -> "RngStream":
        parts = [self.path] if self.path else []
        parts.extend(str(n) for n in names)
        return RngStream(self.seed, "/".join(parts))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"

    # sampling surface used across the lab
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def random(self, size=None):
        return self.generator.random(size)

    def state(self) -> dict:
        st = self.generator.bit_generator.state
        inner = st["state"]
        return {
            "seed": self.seed,
            "path": self.path,
            "counter": [int(v) for v in inner["counter"]],
            "key": [int(v) for v in inner["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        stream = cls(state["seed"], state["path"])
        stream.generator.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return stream
