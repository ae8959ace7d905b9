"""Instruction execution: semantics, faults, latency sampling and counters.

This is the only layer that produces cycle numbers. A ``Machine`` owns one
cache hierarchy, one address space and a TLB per physical core. Logical
threads are bound to (physical core, sibling) pairs; siblings share the
core's private caches and TLBs.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import vm
from .cache import L1, L2, LEVEL_NAMES, MEM, locate, new_hierarchy
from .config import MachineConfig
from .rng import Streams

LINE_SHIFT = 6
TLB_EVENT = {"dtlb_load": "dtlb_load_walk_completed",
             "dtlb_store": "dtlb_store_walk_completed"}
CONTEXTS = ("cache", "tlb", "walk")


class Op(str, enum.Enum):
    LOAD = "LOAD"
    STORE = "STORE"
    CLFLUSH = "CLFLUSH"
    CLDEMOTE = "CLDEMOTE"
    PREFETCH = "PREFETCH"
    MOVNT = "MOVNT"
    FENCE = "FENCE"


@dataclass(frozen=True)
class Instruction:
    kind: Op
    operand: int | None = None
    hint: str = "t0"

    def __post_init__(self):
        if self.kind is Op.FENCE:
            if self.operand is not None:
                raise ValueError("FENCE takes no operand")
        elif self.operand is None:
            raise ValueError(f"{self.kind.value} needs an operand")


def load(va): return Instruction(Op.LOAD, va)
def store(va): return Instruction(Op.STORE, va)
def clflush(va): return Instruction(Op.CLFLUSH, va)
def cldemote(va): return Instruction(Op.CLDEMOTE, va)
def prefetch(va, hint="t0"): return Instruction(Op.PREFETCH, va, hint)
def movnt(va): return Instruction(Op.MOVNT, va)
def fence(): return Instruction(Op.FENCE)


@dataclass(frozen=True)
class PageFault:
    va: int
    op: str
    reason: str


@dataclass
class PerfCounters:
    dtlb_load_walk_completed: int = 0
    dtlb_store_walk_completed: int = 0

    def add(self, events: dict, times: int = 1) -> None:
        for k, v in events.items():
            setattr(self, k, getattr(self, k) + v * times)

    def as_dict(self) -> dict:
        return {"dtlb_load_walk_completed": self.dtlb_load_walk_completed,
                "dtlb_store_walk_completed": self.dtlb_store_walk_completed}


@dataclass
class ExecResult:
    latency: int
    fault: PageFault | None = None
    events: dict = field(default_factory=dict)
    level: int | None = None
    hit: bool | None = None
    translation: vm.TranslationOutcome | None = None


class _Raw:
    """Pre-noise outcome of one execution."""
    __slots__ = ("mean", "fault", "events", "level", "hit", "tr", "steady", "ticks", "noisy")

    def __init__(self, mean, fault=None, events=None, level=None, hit=None, tr=None,
                 steady=False, ticks=0, noisy=True):
        self.mean = mean
        self.fault = fault
        self.events = events or {}
        self.level = level
        self.hit = hit
        self.tr = tr
        # steady: re-running leaves cache/TLB state unchanged except ``ticks``
        self.steady = steady
        self.ticks = ticks
        self.noisy = noisy

    def key(self):
        return (self.mean, self.fault, tuple(sorted(self.events.items())), self.level,
                self.hit, None if self.tr is None else self.tr.key, self.steady, self.ticks)


class Thread:
    def __init__(self, machine: "Machine", name: str, core: int, sibling: int = 0,
                 user: bool = True):
        if not 0 <= core < machine.cfg.hierarchy.cores:
            raise ValueError(f"core {core} out of range")
        self.machine = machine
        self.name = name
        self.core = core
        self.sibling = sibling
        self.user = user
        self.t = 0
        self.noise = machine.streams.normal("thread:" + name)
        self.jitter = machine.streams.uniform("jitter:" + name)
        self.counters = PerfCounters()

    def __repr__(self):
        return f"Thread({self.name!r}, core={self.core}, sibling={self.sibling})"


class Machine:
    def __init__(self, cfg: MachineConfig | None = None, seed: int | None = None,
                 backend: str | None = None):
        self.cfg = cfg or MachineConfig()
        self.seed = self.cfg.seed if seed is None else int(seed)
        self.streams = Streams(self.seed)
        self.profile = self.cfg.profile
        self.hier = new_hierarchy(self.cfg.hierarchy, backend or self.cfg.backend)
        self.space = vm.AddressSpace(vm.FrameAllocator(self.streams.generator("frames")))
        t = self.cfg.tlb
        self.tlbs = [vm.TlbState(t.entries, t.psc_entries, self.profile.walk_ladder)
                     for _ in range(self.cfg.hierarchy.cores)]
        self.context = "cache"
        self.threads: dict[str, Thread] = {}

    # -- setup -------------------------------------------------------------

    def thread(self, name: str, core: int = 0, sibling: int = 0, user: bool = True) -> Thread:
        if name in self.threads:
            raise ValueError(f"thread {name!r} already exists")
        th = Thread(self, name, core, sibling, user)
        self.threads[name] = th
        return th

    def map(self, va: int, length: int, **bits) -> list:
        return vm.map_region(self.space, va, length, vm.PageTableEntry(**bits))

    def line(self, va: int) -> int:
        """Physical line number of a mapped ``va`` (simulator side, no TLB effects)."""
        pa = self.space.pa(va)
        if pa is None:
            raise vm.FrameError(f"{va:#x} is not mapped")
        return pa >> LINE_SHIFT

    def locate(self, va: int):
        return locate(self.hier, self.line(va) << LINE_SHIFT)

    def flush_tlbs(self, core: int | None = None) -> None:
        for c, st in enumerate(self.tlbs):
            if core is None or c == core:
                vm.flush_tlbs(st)

    def counters(self, threads=None) -> PerfCounters:
        out = PerfCounters()
        for th in (threads if threads is not None else self.threads.values()):
            out.add(th.counters.as_dict())
        return out

    # -- semantics ---------------------------------------------------------

    def _events(self, tr: vm.TranslationOutcome) -> dict:
        ev = {}
        for e in tr.events:
            k = TLB_EVENT[e]
            ev[k] = ev.get(k, 0) + 1
        return ev

    def _tlb_outcome(self, tr: vm.TranslationOutcome) -> int:
        # cold walk from the root is the table's "miss" column
        return 1 if (not tr.tlb_hit and tr.walk_depth == "from_PGD") else 0

    def _run(self, th: Thread, ins: Instruction, ctx: str, probe: str | None) -> _Raw:
        p = self.profile
        kind = ins.kind
        if kind is Op.FENCE:
            return _Raw(p.cache["FENCE"]["any"], steady=True)
        va = ins.operand & vm.VA_MASK
        core = th.core
        tlb = self.tlbs[core]

        if kind is Op.CLDEMOTE:
            cm = self.cfg.countermeasures
            if cm.privileged_only and th.user:
                return _Raw(p.privileged_nop, steady=True, noisy=False)
            tr = vm.translate(tlb, self.space, "store", va)
            code = None
            if tr.backed and tr.entry.memtype is not vm.MemType.UC:
                code = self.hier.demote(core, (tr.frame << 12 | (va & 0xFFF)) >> LINE_SHIFT)
            moved = code in (L1, L2)
            if probe == "FlushDemote":
                mean = p.probe_tables[probe][0 if moved else 1]
            elif ctx == "tlb":
                mean = p.tlb_row(tr.entry.bits())[1][self._tlb_outcome(tr)]
            elif ctx == "walk":
                if tr.tlb_hit:
                    mean = p.tlb_row(tr.entry.bits())[1][0]
                else:
                    mean = vm.walk_cost(tr.walk_depth, p.walk_ladder)
            else:
                lvl = LEVEL_NAMES[code] if code is not None else "MEM"
                mean = p.cache["CLDEMOTE"][lvl]
            return _Raw(mean, None, self._events(tr), code, moved, tr, steady=not moved)

        if kind is Op.PREFETCH:
            tr = vm.translate(tlb, self.space, "load", va)
            lvl = None
            if tr.backed and tr.entry.memtype is not vm.MemType.UC:
                lvl = self.hier.prefetch_fill(core, (tr.frame << 12 | (va & 0xFFF)) >> LINE_SHIFT)
            if ctx == "tlb":
                mean = p.tlb_row(tr.entry.bits())[0][self._tlb_outcome(tr)]
            elif ctx == "walk":
                if tr.tlb_hit:
                    mean = p.walk_prefetch_hit[0 if tr.backed else 1]
                else:
                    mean = p.tlb_row(tr.entry.bits())[0][1]
            else:
                mean = p.cache["PREFETCH"]["any"]
            steady = lvl is None or lvl == L1
            return _Raw(mean, None, self._events(tr), lvl, None, tr, steady=steady,
                        ticks=1 if lvl is not None else 0)

        if kind is Op.CLFLUSH:
            tr = vm.translate(tlb, self.space, "load", va)
            cached = False
            if tr.backed:
                cached = self.hier.flush((tr.frame << 12 | (va & 0xFFF)) >> LINE_SHIFT)
            if probe == "FlushFlush":
                mean = p.probe_tables[probe][0 if cached else 1]
            else:
                mean = p.cache["CLFLUSH"]["cached" if cached else "absent"]
            return _Raw(mean, None, self._events(tr), None, cached, tr)

        # LOAD, STORE, MOVNT: architectural accesses that can fault
        tkind = "load" if kind is Op.LOAD else "store"
        tr = vm.translate(tlb, self.space, tkind, va)
        ev = self._events(tr)
        e = tr.entry
        reason = None
        if not tr.backed:
            reason = "not-present"
        elif th.user and not e.user:
            reason = "supervisor"
        elif kind is not Op.LOAD and not e.writable:
            reason = "read-only"
        if reason is not None:
            fault = PageFault(ins.operand, kind.value, reason)
            return _Raw(p.cache["LOAD"]["MEM"], fault, ev, None, None, tr)
        vm.set_accessed(self.space, va, dirty=kind is not Op.LOAD)
        line = (tr.frame << 12 | (va & 0xFFF)) >> LINE_SHIFT
        if kind is Op.MOVNT:
            self.hier.stream_store(line)
            return _Raw(p.cache["MOVNT"]["any"], None, ev, None, None, tr)
        if e.memtype is vm.MemType.UC:
            lvl = MEM
        elif kind is Op.LOAD:
            lvl = self.hier.load(core, line)
        else:
            lvl = self.hier.store(core, line)
        hit = lvl != MEM
        if probe in ("FlushReload", "StreamReload"):
            mean = p.probe_tables[probe][0 if hit else 1]
        else:
            mean = p.cache[kind.value][LEVEL_NAMES[lvl]]
        return _Raw(mean, None, ev, lvl, hit, tr)

    def _sample(self, th: Thread, raw: _Raw, ins: Instruction) -> int:
        if not raw.noisy:
            return int(raw.mean)
        sigma = self.profile.noise_sigma
        x = raw.mean + sigma * th.noise.next() if sigma > 0 else raw.mean
        amp = self.cfg.countermeasures.noise_injection
        if amp > 0 and ins.kind is Op.CLDEMOTE:
            x += amp * (2.0 * th.jitter.next() - 1.0)
        return max(int(np.rint(x)), 1)

    def _sample_bulk(self, th: Thread, raw: _Raw, ins: Instruction, k: int) -> np.ndarray:
        if not raw.noisy:
            return np.full(k, int(raw.mean), dtype=np.int64)
        sigma = self.profile.noise_sigma
        x = np.full(k, float(raw.mean))
        amp = self.cfg.countermeasures.noise_injection
        jit = amp > 0 and ins.kind is Op.CLDEMOTE
        if sigma > 0 and jit:
            # interleaved draws must match the one-at-a-time order
            z = np.empty(k)
            u = np.empty(k)
            for i in range(k):
                z[i] = th.noise.next()
                u[i] = th.jitter.next()
            x = x + sigma * z + amp * (2.0 * u - 1.0)
        elif sigma > 0:
            x = x + sigma * th.noise.take(k)
        elif jit:
            x = x + amp * (2.0 * th.jitter.take(k) - 1.0)
        return np.maximum(np.rint(x).astype(np.int64), 1)

    def execute(self, th: Thread, ins: Instruction, context: str | None = None,
                probe: str | None = None) -> ExecResult:
        ctx = context or self.context
        raw = self._run(th, ins, ctx, probe)
        lat = self._sample(th, raw, ins)
        th.counters.add(raw.events)
        th.t += lat
        return ExecResult(lat, raw.fault, raw.events, raw.level, raw.hit, raw.tr)

    def measure(self, th: Thread, ins: Instruction, probe: str | None = None,
                context: str | None = None) -> int:
        """Serialized timed execution; returns the sampled cycles."""
        return self.execute(th, ins, context, probe).latency

    def repeat(self, th: Thread, ins: Instruction, n: int, context: str | None = None,
               probe: str | None = None, fast: bool = True) -> tuple[np.ndarray, int]:
        """Execute ``ins`` n times back to back; returns (latencies, fault count).

        Once two consecutive executions agree on every outcome and the
        instruction leaves state unchanged, the remaining executions are
        extrapolated and their noise drawn in bulk. The result equals the
        one-by-one loop exactly.
        """
        ctx = context or self.context
        out = np.empty(n, dtype=np.int64)
        faults = 0
        prev = None
        i = 0
        while i < n:
            raw = self._run(th, ins, ctx, probe)
            out[i] = self._sample(th, raw, ins)
            th.counters.add(raw.events)
            th.t += int(out[i])
            faults += raw.fault is not None
            i += 1
            key = raw.key()
            if fast and raw.steady and raw.fault is None and key == prev and i < n:
                k = n - i
                out[i:] = self._sample_bulk(th, raw, ins, k)
                th.counters.add(raw.events, k)
                th.t += int(out[i:].sum())
                self.hier.now += raw.ticks * k
                break
            prev = key
        return out, faults

    _FAST_OPS = (Op.LOAD, Op.STORE, Op.CLDEMOTE, Op.CLFLUSH, Op.FENCE)

    def rounds(self, th: Thread, program, n: int, fast: bool = True) -> np.ndarray:
        """Run ``program`` (a list of instructions) n times in the cache context.

        Returns an (n, len(program)) array of latencies. Once a round runs
        with every translation hitting the TLB, later rounds skip address
        translation: the same pages keep hitting, so only the hierarchy op
        and the latency draw remain. The result equals the slow loop exactly.
        """
        program = list(program)
        out = np.empty((n, len(program)), dtype=np.int64)
        i = 0
        eligible = fast and not self.cfg.countermeasures.privileged_only and \
            all(ins.kind in self._FAST_OPS for ins in program)
        plan = None
        while i < n and plan is None:
            ok = eligible
            lines = []
            for j, ins in enumerate(program):
                r = self.execute(th, ins, context="cache")
                out[i, j] = r.latency
                if ins.kind is Op.FENCE:
                    lines.append(None)
                    continue
                tr = r.translation
                if r.fault is not None or tr is None or not tr.tlb_hit or not tr.backed \
                        or tr.entry.memtype is vm.MemType.UC:
                    ok = False
                    continue
                va = ins.operand & vm.VA_MASK
                lines.append((tr.frame << 12 | (va & 0xFFF)) >> LINE_SHIFT)
            i += 1
            if ok:
                plan = lines
        if plan is None:
            return out
        h, p, core = self.hier, self.profile.cache, th.core
        by_level = {op: [p[op][LEVEL_NAMES[c]] for c in range(len(LEVEL_NAMES))]
                    for op in ("LOAD", "STORE", "CLDEMOTE")}
        flush = (p["CLFLUSH"]["absent"], p["CLFLUSH"]["cached"])
        steps = []
        for j, ins in enumerate(program):
            k = ins.kind
            if k is Op.FENCE:
                steps.append((None, None, p["FENCE"]["any"]))
            elif k is Op.CLFLUSH:
                steps.append((h.flush, None, flush))
            else:
                fn = {Op.LOAD: h.load, Op.STORE: h.store, Op.CLDEMOTE: h.demote}[k]
                steps.append((fn, core, by_level[k.value]))
        rest = n - i
        means = np.empty((rest, len(program)))
        for r in range(rest):
            row = means[r]
            for j, (fn, c, table) in enumerate(steps):
                if fn is None:
                    row[j] = table
                elif c is None:
                    row[j] = table[1 if fn(plan[j]) else 0]
                else:
                    row[j] = table[fn(c, plan[j])]
        sigma = self.profile.noise_sigma
        amp = self.cfg.countermeasures.noise_injection
        demotes = [ins.kind is Op.CLDEMOTE for ins in program]
        if amp > 0 and any(demotes):
            # jitter draws interleave with the noise draws: go one by one
            raw = _Raw(0)
            for r in range(rest):
                for j, ins in enumerate(program):
                    raw.mean = means[r, j]
                    out[i + r, j] = self._sample(th, raw, ins)
        else:
            x = means + sigma * th.noise.take(means.size).reshape(means.shape) \
                if sigma > 0 else means
            out[i:] = np.maximum(np.rint(x).astype(np.int64), 1)
        th.t += int(out[i:].sum())
        return out

    def fetch(self, th: Thread, va: int) -> int:
        """Instruction-fetch stub: pulls the line into L1i. Returns the level."""
        return self.hier.fetch(th.core, self.line(va))


# -- cooperative scheduler ---------------------------------------------------


@dataclass
class Wait:
    """Yielded by a thread body to block on a named barrier."""
    barrier: str


class Scheduler:
    """Round-robin driver for generator-based thread bodies.

    A body is a generator function taking the Thread. It yields ``None`` to
    let others run or ``Wait(name)`` to block on a barrier. A barrier opens
    when all its parties arrive; the released threads' clocks advance to the
    latest arrival.
    """

    def __init__(self, machine: Machine):
        self.machine = machine
        self.bodies = []
        self.parties: dict[str, int] = {}
        self.waiting: dict[str, list] = {}

    def barrier(self, name: str, parties: int) -> None:
        self.parties[name] = parties

    def spawn(self, th: Thread, body, *args) -> None:
        self.bodies.append((th, body(th, *args)))

    def run(self) -> None:
        ready = deque(self.bodies)
        self.bodies = []
        while ready:
            th, gen = ready.popleft()
            try:
                cmd = next(gen)
            except StopIteration:
                continue
            if cmd is None:
                ready.append((th, gen))
                continue
            name = cmd.barrier
            q = self.waiting.setdefault(name, [])
            q.append((th, gen))
            need = self.parties.get(name, 2)
            if len(q) >= need:
                t = max(x.t for x, _ in q)
                for x, g in q:
                    x.t = t
                    ready.append((x, g))
                self.waiting[name] = []
        stuck = {k: len(v) for k, v in self.waiting.items() if v}
        if stuck:
            raise RuntimeError(f"deadlock: threads blocked on {stuck}")
