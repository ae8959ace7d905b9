"""Latency profile: mean cycles per (instruction, state) in each context.

Three contexts exist because the same nominal operation was measured at
different means in different experiments:

* ``cache``: instruction latency by pre-execution residency level.
* ``tlb``: CLDEMOTE / PREFETCH latency by page bits, memtype and TLB outcome.
* ``walk``: CLDEMOTE latency set by the walk start level (page-level scan).

Probe round timings (reset + timed op, measurement overhead included) are
kept per probe kind in ``probe_tables``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .vm import DEFAULT_WALK_LADDER, MemType

WB, WP, UC = MemType.WB, MemType.WP, MemType.UC

# (P, U, D, NX, A, memtype) -> prefetch (hit, miss), cldemote (hit, miss)
TLB_TABLE = {
    (1, 1, 1, 1, 1, WB): ((113, 133), (160, 180)),
    (1, 0, 1, 1, 0, WB): ((132, 132), (137, 136)),
    (1, 1, 1, 1, 0, WB): ((132, 133), (137, 136)),
    (1, 0, 1, 1, 1, WB): ((112, 132), (114, 136)),
    (0, 1, 1, 1, 1, WB): ((115, 133), (139, 148)),
    (0, 0, 1, 1, 1, WB): ((115, 132), (138, 149)),
    (1, 1, 1, 0, 1, WB): ((113, 132), (160, 180)),
    (1, 1, 0, 1, 1, WB): ((112, 134), (160, 180)),
    (0, 0, 1, 1, 0, WB): ((132, 132), (148, 148)),
    (1, 1, 1, 1, 1, WP): ((113, 132), (114, 137)),
    (1, 1, 1, 1, 1, UC): ((113, 135), (115, 138)),
}


def _default_cache_table():
    return {
        "CLDEMOTE": {"L1": 210, "L2": 200, "LLC": 132, "REMOTE": 132, "MEM": 132},
        "LOAD": {"L1": 58, "L2": 74, "LLC": 118, "REMOTE": 170, "MEM": 308},
        "STORE": {"L1": 58, "L2": 74, "LLC": 118, "REMOTE": 170, "MEM": 308},
        "CLFLUSH": {"cached": 213, "absent": 139},
        "PREFETCH": {"any": 113},
        "MOVNT": {"any": 250},
        "FENCE": {"any": 10},
    }


def _default_probe_tables():
    # probe kind -> (hit mean, miss mean) of the timed operation
    return {
        "FlushDemote": (208, 121),
        "FlushReload": (58, 308),
        "FlushFlush": (213, 139),
        "StreamReload": (61, 309),
    }


@dataclass
class LatencyProfile:
    cache: dict = field(default_factory=_default_cache_table)
    probe_tables: dict = field(default_factory=_default_probe_tables)
    tlb: dict = field(default_factory=lambda: dict(TLB_TABLE))
    walk_ladder: tuple = DEFAULT_WALK_LADDER
    # PREFETCH served by the load TLB in the walk context: backed / not backed
    walk_prefetch_hit: tuple = (108, 112)
    # user-mode CLDEMOTE under the privileged-only countermeasure
    privileged_nop: int = 132
    noise_sigma: float = 6.0
    clock_ghz: float = 2.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.clock_ghz <= 0:
            raise ValueError("clock_ghz must be > 0")
        for op, row in self.cache.items():
            for k, v in row.items():
                if v <= 0:
                    raise ValueError(f"latency {op}.{k} must be positive")
        if any(b > a for a, b in zip(self.walk_ladder, self.walk_ladder[1:])):
            raise ValueError("walk ladder must be non-increasing from PGD to PT")

    def tlb_row(self, bits: tuple):
        """Table row for page bits, falling back to coarser keys."""
        row = self.tlb.get(bits)
        if row is not None:
            return row
        p, u, _d, _nx, a, mt = bits
        for key, val in self.tlb.items():
            if (key[0], key[1], key[4], key[5]) == (p, u, a, mt):
                return val
        for key, val in self.tlb.items():
            if (key[0], key[1], key[4]) == (p, u, a):
                return val
        raise KeyError(f"no latency row for page bits {bits}")

    def to_dict(self) -> dict:
        return {
            "cache": self.cache,
            "probe_tables": {k: list(v) for k, v in self.probe_tables.items()},
            "tlb": [[*k[:5], k[5].value, *v[0], *v[1]] for k, v in self.tlb.items()],
            "walk_ladder": list(self.walk_ladder),
            "walk_prefetch_hit": list(self.walk_prefetch_hit),
            "privileged_nop": self.privileged_nop,
            "noise_sigma": self.noise_sigma,
            "clock_ghz": self.clock_ghz,
        }
