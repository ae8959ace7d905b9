"""Multi-core cache hierarchy: per-core L1d/L1i/L2, sliced LLC and directory.

The state machine lives in a compiled extension (``_core``) with a
pure-Python twin (``_pycore``). The compiled one is used when it imports,
unless ``DEMOTESIM_PURE=1`` is set in the environment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from . import _pycore
from ._pycore import L1, L2, LLC, MEM, REMOTE

LEVEL_NAMES = {L1: "L1", L2: "L2", LLC: "LLC", REMOTE: "REMOTE", MEM: "MEM"}

_compiled = None
if os.environ.get("DEMOTESIM_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
BACKENDS = {"python": _pycore.Hierarchy}
if _compiled is not None:
    BACKENDS["cython"] = _compiled.Hierarchy

LINE_BITS = 6


@dataclass(frozen=True)
class HierarchyConfig:
    cores: int = 12
    l1d: tuple = (64, 12)
    l1i: tuple = (64, 8)
    l2: tuple = (2048, 16)
    llc: tuple = (2048, 15)
    dir_ways: int = 25
    slices: int | None = None  # defaults to one slice per core

    def __post_init__(self):
        if self.cores < 1:
            raise ValueError("cores must be >= 1")
        for name in ("l1d", "l1i", "l2", "llc"):
            sets, ways = getattr(self, name)
            if sets < 1 or sets & (sets - 1):
                raise ValueError(f"{name} sets must be a power of two, got {sets}")
            if ways < 1:
                raise ValueError(f"{name} ways must be >= 1")
        if self.dir_ways < 1:
            raise ValueError("dir_ways must be >= 1")
        if self.cores > 62:
            raise ValueError("at most 62 cores are supported")

    @property
    def n_slices(self) -> int:
        return self.slices if self.slices else self.cores


def new_hierarchy(cfg: HierarchyConfig, backend: str | None = None):
    """Build an empty hierarchy on the requested (or default) backend."""
    cls = BACKENDS[backend or BACKEND]
    return cls(cfg.cores, cfg.l1d[0], cfg.l1d[1], cfg.l1i[0], cfg.l1i[1],
               cfg.l2[0], cfg.l2[1], cfg.llc[0], cfg.llc[1], cfg.dir_ways,
               cfg.n_slices)


@dataclass(frozen=True)
class CacheCoordinates:
    offset: int
    set: int
    slice: int
    tag: int

    @classmethod
    def of(cls, pa: int, cfg: HierarchyConfig) -> "CacheCoordinates":
        line = pa >> LINE_BITS
        sets = cfg.llc[0]
        return cls(offset=pa & ((1 << LINE_BITS) - 1),
                   set=line & (sets - 1),
                   slice=_pycore.slice_hash(line, cfg.n_slices),
                   tag=line >> (sets.bit_length() - 1))


@dataclass(frozen=True)
class LineState:
    residency: frozenset = field(default_factory=frozenset)
    coherence: str = "I"
    llc_rank: int = -1
    dir_state: str = "none"
    dir_mask: int = 0
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def in_llc(self) -> bool:
        return ("LLC",) in self.residency

    def private_cores(self) -> set:
        return {r[1] for r in self.residency if r[0] == "L2"}


def locate(h, pa: int) -> LineState:
    """Read-only residency/coherence view of the line holding ``pa``."""
    d = h.locate(pa >> LINE_BITS)
    res = set()
    for c in d["l1d"]:
        res.add(("L1d", c))
    for c in d["l1i"]:
        res.add(("L1i", c))
    for c in d["l2"]:
        res.add(("L2", c))
    if d["llc"]:
        res.add(("LLC",))
    holders = len(d["l2"]) + (1 if d["llc"] else 0)
    if not res:
        coh = "I"
    elif d["dirty"]:
        coh = "M"
    elif holders > 1:
        coh = "S"
    else:
        coh = "E"
    mask = d["dir_mask"]
    if mask < 0:
        state = "none"
    elif mask == 0:
        state = "llc"
    else:
        state = "private"
    return LineState(frozenset(res), coh, d["llc_rank"], state, max(mask, 0), d)


__all__ = [
    "L1", "L2", "LLC", "REMOTE", "MEM", "LEVEL_NAMES", "BACKEND", "BACKENDS",
    "HierarchyConfig", "CacheCoordinates", "LineState", "locate", "new_hierarchy",
]
