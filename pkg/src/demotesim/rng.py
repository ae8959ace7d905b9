"""Seeded random streams.

One global seed fans out into named child streams, so adding or reordering
consumers never changes what another consumer sees. Draws are buffered in
fixed-size chunks; ``take(n)`` returns exactly what ``n`` calls to ``next()``
would have returned.
"""

from __future__ import annotations

import zlib

import numpy as np

CHUNK = 4096


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def generator(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name),))
    return np.random.default_rng(ss)


class Stream:
    """Buffered standard-normal (or uniform [0,1)) stream."""

    def __init__(self, gen: np.random.Generator, kind: str = "normal"):
        self.gen = gen
        self.kind = kind
        self.buf = np.empty(0)
        self.pos = 0

    def _refill(self):
        if self.kind == "normal":
            self.buf = self.gen.standard_normal(CHUNK)
        else:
            self.buf = self.gen.random(CHUNK)
        self.pos = 0

    def next(self) -> float:
        if self.pos >= len(self.buf):
            self._refill()
        v = self.buf[self.pos]
        self.pos += 1
        return float(v)

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n)
        done = 0
        while done < n:
            if self.pos >= len(self.buf):
                self._refill()
            k = min(n - done, len(self.buf) - self.pos)
            out[done:done + k] = self.buf[self.pos:self.pos + k]
            self.pos += k
            done += k
        return out


class Streams:
    """Factory of named streams under one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, name: str) -> np.random.Generator:
        return generator(self.seed, name)

    def normal(self, name: str) -> Stream:
        return Stream(self.generator(name + "/normal"), "normal")

    def uniform(self, name: str) -> Stream:
        return Stream(self.generator(name + "/uniform"), "uniform")
