"""Eviction sets: candidate pools, LLC placement, group-testing reduction,
and the prime-and-time reverse engineering of cache and directory ways.

Eviction tests run through the hierarchy's bulk kernels. Their cycle cost is
the sum of the profile means of every operation issued, plus a coordination
cost per helper-thread placement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vm
from .cache import L1, MEM, CacheCoordinates
from .machine import LINE_SHIFT, Machine, cldemote, load

LEVEL_KEYS = ("L1", "L2", "LLC", "REMOTE", "MEM")
POOL_BASE = 0x200000000000
CONGRUENT_BASE = 0x300000000000


class EvsetError(RuntimeError):
    pass


class NotAnEvictionSet(EvsetError):
    pass


class SingleCoreError(EvsetError):
    pass


@dataclass
class BuildStats:
    memory_ops: int = 0
    simulated_cycles: int = 0
    success: bool = False
    tests: int = 0

    def __post_init__(self):
        if self.simulated_cycles < self.memory_ops:
            raise ValueError("cycles must be >= ops")


@dataclass
class EvictionSet:
    target: int
    members: list
    level: str = "LLC"
    stats: BuildStats = field(default_factory=BuildStats)


def generate_candidates(machine: Machine, target: int, pool_size: int | None = None,
                        base: int = POOL_BASE) -> list:
    """Fresh user pages; each candidate shares va bits 11:0 with ``target``."""
    n = machine.cfg.evset.pool_size if pool_size is None else pool_size
    if n <= 0:
        return []
    vm.map_region(machine.space, base, n * vm.PAGE_SIZE,
                  vm.PageTableEntry(user=True))
    off = target & (vm.PAGE_SIZE - 1)
    return [base + i * vm.PAGE_SIZE + off for i in range(n)]


def congruent(machine: Machine, a: int, b: int) -> bool:
    """Oracle: same LLC set and slice."""
    la, lb = machine.line(a), machine.line(b)
    return machine.hier.llc_index(la) == machine.hier.llc_index(lb)


def congruent_addresses(machine: Machine, target: int, count: int,
                        base: int = CONGRUENT_BASE) -> list:
    """Oracle-assisted generator: ``count`` mapped addresses congruent with target."""
    h = machine.hier
    want = h.llc_index(machine.line(target))
    off = target & (vm.PAGE_SIZE - 1)
    alloc = machine.space.alloc
    gen = machine.streams.generator(f"congruent:{base:#x}")
    out = []
    page = base
    while len(out) < count:
        f = int(gen.integers(1, alloc.limit))
        if f in alloc.used or h.llc_index((f << 12 | off) >> LINE_SHIFT) != want:
            continue
        alloc.used.add(f)
        vm.map_region(machine.space, page, vm.PAGE_SIZE, vm.PageTableEntry(user=True),
                      frames=[f])
        out.append(page + off)
        page += vm.PAGE_SIZE
    return out


class Placement:
    HELPER = "helper_thread"
    CLDEMOTE = "cldemote"
    ALIASES = {"helper": HELPER, "helper_thread": HELPER, "demote": CLDEMOTE,
               "cldemote": CLDEMOTE}

    @classmethod
    def parse(cls, name: str) -> str:
        try:
            return cls.ALIASES[name]
        except KeyError:
            raise ValueError(f"unknown placement {name!r}") from None


def place_in_llc(machine: Machine, va: int, method: str, main: int = 0,
                 helper: int = 1) -> int:
    """Put the line of ``va`` into the LLC. Returns the cycles spent."""
    method = Placement.parse(method)
    m = machine
    th = m.threads.get("evset-main") or m.thread("evset-main", main)
    if method == Placement.CLDEMOTE:
        return m.execute(th, load(va)).latency + m.execute(th, cldemote(va)).latency
    if m.cfg.hierarchy.cores < 2:
        raise SingleCoreError("helper-thread placement needs two physical cores")
    hp = m.threads.get("evset-helper") or m.thread("evset-helper", helper)
    cyc = m.execute(hp, load(va)).latency + m.execute(th, load(va)).latency
    return cyc + m.cfg.evset.helper_cost


class Tester:
    """Attacker-side eviction test for one target, level and placement method."""

    def __init__(self, machine: Machine, target: int, level: str = "LLC",
                 method: str = Placement.CLDEMOTE, main: int = 0):
        self.m = machine
        self.level = level
        self.method = Placement.parse(method)
        cores = machine.cfg.hierarchy.cores
        self.main = main
        needs = 1
        if level == "directory":
            needs = 2
        elif level == "LLC" and self.method == Placement.HELPER:
            needs = 3
        if cores < needs:
            raise SingleCoreError(f"{level} test with {self.method} needs {needs} cores")
        self.helper = (main + 1) % cores
        self.probe_core = (main + 2) % cores if self.method == Placement.HELPER else main
        self.target = target
        self.tline = machine.line(target)
        self.th = machine.threads.get("evset-main") or machine.thread("evset-main", main)
        p = machine.profile
        self.load_mean = np.array([p.cache["LOAD"][k] for k in LEVEL_KEYS], dtype=float)
        self.demote_mean = np.array([p.cache["CLDEMOTE"][k] for k in LEVEL_KEYS], dtype=float)
        self.flush_mean = np.array([p.cache["CLFLUSH"]["absent"], p.cache["CLFLUSH"]["cached"]],
                                   dtype=float)
        lm = p.cache["LOAD"]
        if level == "LLC":
            hi = "MEM" if self.method == Placement.CLDEMOTE else "REMOTE"
            self.threshold = (lm["LLC"] + lm[hi]) / 2
        elif level == "L2":
            self.threshold = (lm["L2"] + lm["LLC"]) / 2
        elif level == "directory":
            self.threshold = (lm["L1"] + lm["LLC"]) / 2
        else:
            raise ValueError(f"unknown level {level!r}")
        self.ops = 0
        self.cycles = 0.0
        self.tests = 0

    def lines(self, addrs) -> np.ndarray:
        return np.fromiter((self.m.line(a) for a in addrs), dtype=np.int64, count=len(addrs))

    def _once(self, members: np.ndarray) -> bool:
        h = self.m.hier
        if self.level == "LLC":
            mode = 0 if self.method == Placement.CLDEMOTE else 1
            flush = np.append(members, self.tline)
            lvl, counts = h.evtest(self.tline, members, flush, mode, self.main, self.helper,
                                   self.probe_core)
            cyc = counts[0:5] @ self.load_mean + counts[5:10] @ self.demote_mean
            cyc += counts[10:12] @ self.flush_mean
            if mode == 1:
                cyc += (len(members) + 1) * self.m.cfg.evset.helper_cost
            ops = int(counts.sum())
        else:
            for x in members:
                h.flush(int(x))
            h.flush(self.tline)
            prime = self.main if self.level == "L2" else self.helper
            lvl = int(h.prime_probe(prime, members, self.main, self.tline, 1, True, 2)[0])
            ops = 2 * len(members) + 2
            cyc = len(members) * (self.flush_mean[1] + self.load_mean[MEM])
            cyc += self.flush_mean[1] + 2 * self.load_mean[L1]
        lat = self.load_mean[lvl] + self.m.profile.noise_sigma * self.th.noise.next()
        lat = max(int(np.rint(lat)), 1)
        self.ops += ops + 1
        self.cycles += cyc + lat
        self.tests += 1
        return lat > self.threshold

    def evicts(self, members, votes: int | None = None) -> bool:
        """Majority vote over repeated tests (stops once the vote is decided)."""
        members = np.asarray(members, dtype=np.int64)
        if len(members) == 0:
            return False
        votes = votes or self.m.cfg.evset.votes
        need = votes // 2 + 1
        yes = no = 0
        while yes < need and no < need:
            if self._once(members):
                yes += 1
            else:
                no += 1
        return yes >= need

    def stats(self, success: bool) -> BuildStats:
        cyc = int(round(self.cycles))
        return BuildStats(self.ops, max(cyc, self.ops), success, self.tests)


def is_eviction_set(machine: Machine, target: int, members, level: str = "LLC",
                    method: str = Placement.CLDEMOTE) -> bool:
    t = Tester(machine, target, level, method)
    return t.evicts(t.lines(members))


def reduce(machine: Machine, target: int, candidates, a: int, level: str = "LLC",
           method: str = Placement.CLDEMOTE, tester: Tester | None = None,
           retries: int = 2, check=None) -> EvictionSet:
    """Group-testing reduction down to ``a`` members.

    Splits the set into a+1 groups and drops the first group whose removal
    keeps the target evicted. ``check`` (if given) is called with the
    current member lines after every discard.
    """
    t = tester or Tester(machine, target, level, method)
    addrs = np.asarray(list(candidates), dtype=np.int64)
    S = t.lines(addrs)
    idx = np.arange(len(S))
    if not t.evicts(S):
        raise NotAnEvictionSet("candidates do not evict the target")
    fails = 0
    while len(idx) > a:
        groups = np.array_split(np.arange(len(idx)), a + 1)
        for g in groups:
            keep = np.delete(idx, g)
            if len(keep) >= a and t.evicts(S[keep]):
                idx = keep
                fails = 0
                if check is not None:
                    check(S[idx])
                break
        else:
            fails += 1
            if fails > retries:
                es = EvictionSet(target, [int(x) for x in addrs[idx]], level, t.stats(False))
                return es
    members = [int(x) for x in addrs[idx]]
    return EvictionSet(target, members, level, t.stats(True))


def construct(machine: Machine, target: int, placement: str, seed: int | None = None,
              a: int | None = None, pool_size: int | None = None) -> tuple:
    """Generate a pool, reduce it to an LLC eviction set, verify on the oracle."""
    a = a or machine.cfg.hierarchy.llc[1]
    placement = Placement.parse(placement)
    cands = generate_candidates(machine, target, pool_size)
    t = Tester(machine, target, "LLC", placement)
    try:
        es = reduce(machine, target, cands, a, "LLC", placement, tester=t)
    except NotAnEvictionSet:
        return EvictionSet(target, [], "LLC", t.stats(False)), t.stats(False)
    ok = es.stats.success and len(es.members) == a and \
        all(congruent(machine, target, x) for x in es.members)
    es.stats.success = ok
    return es, es.stats


# -- reverse engineering -------------------------------------------------------


@dataclass
class Curve:
    n: list
    latency: list
    breakpoints: list
    levels: list  # latency class entered at each breakpoint
    inferred: dict

    def rows(self):
        return list(zip(self.n, self.latency))


def detect_breakpoints(n_values, curve, jump: float = 8.0) -> list:
    """Positions where the mean latency rises by more than ``jump`` cycles."""
    out = []
    for i in range(1, len(curve)):
        if curve[i] - curve[i - 1] > jump:
            out.append(n_values[i])
    return out


def _classify(latency: float, profile) -> str:
    lm = profile.cache["LOAD"]
    return min(("L1", "L2", "LLC", "REMOTE", "MEM"), key=lambda k: abs(lm[k] - latency))


def _curve(machine: Machine, target: int, addrs: list, max_n: int, samples: int,
           prime_core: int, probe_core: int, stable: int = 8):
    h = machine.hier
    tline = machine.line(target)
    lines = np.array([machine.line(x) for x in addrs], dtype=np.int64)
    th = machine.threads.get("re-main") or machine.thread("re-main", probe_core)
    load_mean = np.array([machine.profile.cache["LOAD"][k] for k in LEVEL_KEYS], dtype=float)
    sigma = machine.profile.noise_sigma
    ns, lat = [], []
    for n in range(1, max_n + 1):
        for x in lines[:n]:
            h.flush(int(x))
        h.flush(tline)
        lv = h.prime_probe(prime_core, lines[:n], probe_core, tline, samples, True, stable)
        full = np.empty(samples, dtype=np.int64)
        full[:len(lv)] = lv
        full[len(lv):] = lv[-1]
        vals = load_mean[full] + sigma * th.noise.take(samples)
        ns.append(n)
        lat.append(float(np.maximum(np.rint(vals), 1).mean()))
    return ns, lat


def reverse_llc(machine: Machine, target: int, max_n: int = 40, samples: int = 100_000,
                addrs: list | None = None) -> Curve:
    """Same-core prime-and-time curve; infers L1d, L2 and LLC-slice ways."""
    addrs = addrs or congruent_addresses(machine, target, max_n)
    ns, lat = _curve(machine, target, addrs, max_n, samples, 0, 0)
    bps = detect_breakpoints(ns, lat)
    lv = [_classify(lat[ns.index(b)], machine.profile) for b in bps]
    inferred = {}
    step = dict(zip(lv, bps))
    if "L2" in step:
        inferred["l1d_ways"] = step["L2"]
    if "LLC" in step:
        inferred["l2_ways"] = step["LLC"]
    if "MEM" in step and "LLC" in step:
        inferred["llc_ways"] = step["MEM"] - step["LLC"]
    return Curve(ns, lat, bps, lv, inferred)


def reverse_directory(machine: Machine, target: int, max_n: int = 40,
                      samples: int = 100_000, addrs: list | None = None) -> Curve:
    """Cross-core curve: main holds the target, an evictor core primes."""
    if machine.cfg.hierarchy.cores < 2:
        raise SingleCoreError("directory reverse engineering needs two physical cores")
    addrs = addrs or congruent_addresses(machine, target, max_n)
    ns, lat = _curve(machine, target, addrs, max_n, samples, 1, 0)
    bps = detect_breakpoints(ns, lat)
    lv = [_classify(lat[ns.index(b)], machine.profile) for b in bps]
    inferred = {"dir_ways": bps[0]} if bps else {}
    return Curve(ns, lat, bps, lv, inferred)


def target_coordinates(machine: Machine, va: int) -> CacheCoordinates:
    return CacheCoordinates.of(machine.line(va) << LINE_SHIFT, machine.cfg.hierarchy)


__all__ = [
    "BuildStats", "EvictionSet", "EvsetError", "NotAnEvictionSet", "SingleCoreError",
    "Placement", "Tester", "generate_candidates", "congruent", "congruent_addresses",
    "place_in_llc", "is_eviction_set", "reduce", "construct", "detect_breakpoints",
    "reverse_llc", "reverse_directory", "Curve", "target_coordinates",
]
