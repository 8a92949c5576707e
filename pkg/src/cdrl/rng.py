"""Seeded counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *path)`` through
``SeedSequence`` spawn keys, so sub-streams are independent of the order in
which they are requested.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def get_state(gen: np.random.Generator) -> dict:
    """JSON-friendly snapshot of a Philox generator."""
    st = gen.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "counter": [int(c) for c in st["state"]["counter"]],
        "key": [int(k) for k in st["state"]["key"]],
        "buffer": [int(b) for b in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def set_state(gen: np.random.Generator, snap: dict) -> None:
    gen.bit_generator.state = {
        "bit_generator": snap["bit_generator"],
        "state": {
            "counter": np.array(snap["counter"], dtype=np.uint64),
            "key": np.array(snap["key"], dtype=np.uint64),
        },
        "buffer": np.array(snap["buffer"], dtype=np.uint64),
        "buffer_pos": snap["buffer_pos"],
        "has_uint32": snap["has_uint32"],
        "uinteger": snap["uinteger"],
    }


def from_state(snap: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.Philox(0))
    set_state(gen, snap)
    return gen
