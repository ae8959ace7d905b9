"""Probe primitives, threshold calibration and the attacker/victim harness.

A probe round is: reset the target, let the victim run, then time the
probe operation. Probing also restores the round-start state, so rounds can
run back to back.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import vm
from .machine import (Instruction, Machine, Scheduler, Thread, Wait, clflush,
                      cldemote, load, movnt, prefetch)


class ProbeKind(str, enum.Enum):
    FlushDemote = "FlushDemote"
    FlushReload = "FlushReload"
    FlushFlush = "FlushFlush"
    StreamReload = "StreamReload"
    DemoteTime = "DemoteTime"


# accessed => slower for these kinds, faster for the reload kinds
SLOW_MEANS_ACCESSED = {ProbeKind.FlushDemote, ProbeKind.FlushFlush, ProbeKind.DemoteTime}


class CalibrationError(RuntimeError):
    pass


class ProbeFault(RuntimeError):
    pass


@dataclass(frozen=True)
class Threshold:
    cycles: float
    hit_mean: float
    miss_mean: float

    def __post_init__(self):
        lo, hi = sorted((self.hit_mean, self.miss_mean))
        if not lo < self.cycles < hi:
            raise ValueError(f"threshold {self.cycles} not strictly between {lo} and {hi}")


def table_threshold(machine: Machine, kind: ProbeKind) -> Threshold:
    """Midpoint threshold straight from the profile means."""
    kind = ProbeKind(kind)
    if kind is ProbeKind.DemoteTime:
        raise ValueError("DemoteTime thresholds depend on the page bits; calibrate instead")
    hit, miss = machine.profile.probe_tables[kind.value]
    return Threshold((hit + miss) / 2, hit, miss)


def _timed(kind: ProbeKind, va: int) -> Instruction:
    return {
        ProbeKind.FlushDemote: cldemote(va),
        ProbeKind.FlushReload: load(va),
        ProbeKind.FlushFlush: clflush(va),
        ProbeKind.StreamReload: load(va),
    }[kind]


def reset(machine: Machine, th: Thread, kind: ProbeKind, va: int) -> None:
    """Put the target in the round-start (not accessed) state."""
    kind = ProbeKind(kind)
    if kind is ProbeKind.StreamReload:
        r = machine.execute(th, movnt(va))
        if r.fault is not None:
            raise ProbeFault(f"Stream+Reload needs a writable target: {r.fault.reason}")
    elif kind is not ProbeKind.DemoteTime:
        machine.execute(th, clflush(va))


def timed(machine: Machine, th: Thread, kind: ProbeKind, va: int) -> int:
    """Time the probe operation and restore the round-start state."""
    kind = ProbeKind(kind)
    if kind is ProbeKind.DemoteTime:
        return machine.measure(th, cldemote(va), context="tlb")
    cyc = machine.measure(th, _timed(kind, va), probe=kind.value)
    if kind is not ProbeKind.FlushFlush:
        reset(machine, th, kind, va)
    return cyc


def classify(kind: ProbeKind, cycles: float, threshold: Threshold) -> int:
    if ProbeKind(kind) in SLOW_MEANS_ACCESSED:
        return int(cycles > threshold.cycles)
    return int(cycles < threshold.cycles)


def probe(machine: Machine, th: Thread, kind: ProbeKind, va: int,
          threshold: Threshold) -> int:
    """1 if the target was accessed since the last reset."""
    return classify(kind, timed(machine, th, kind, va), threshold)


def calibrate(machine: Machine, th: Thread, kind: ProbeKind, va: int, n: int = 10_000,
              max_overlap: float = 0.05, miss_va: int | None = None) -> Threshold:
    """Sample both ground-truth states n times; threshold = midpoint of means.

    For DemoteTime the hit state is ``va`` with a warm TLB and the miss
    state is ``miss_va`` (an unmapped address).
    """
    kind = ProbeKind(kind)
    hits = np.empty(n)
    misses = np.empty(n)
    if kind is ProbeKind.DemoteTime:
        if miss_va is None:
            raise ValueError("DemoteTime calibration needs miss_va")
        machine.execute(th, cldemote(va), context="tlb")
        hits[:] = machine.repeat(th, cldemote(va), n, context="tlb")[0]
        machine.execute(th, cldemote(miss_va), context="tlb")
        misses[:] = machine.repeat(th, cldemote(miss_va), n, context="tlb")[0]
    else:
        reset(machine, th, kind, va)
        for i in range(n):
            machine.execute(th, load(va))
            hits[i] = timed(machine, th, kind, va)
        for i in range(n):
            misses[i] = timed(machine, th, kind, va)
    h, m = float(hits.mean()), float(misses.mean())
    if h == m:
        raise CalibrationError(f"{kind.value}: hit and miss means are identical ({h:.1f})")
    thr = (h + m) / 2
    slow_hit = h > m
    wrong = np.count_nonzero(hits <= thr if slow_hit else hits >= thr)
    wrong += np.count_nonzero(misses >= thr if slow_hit else misses <= thr)
    if wrong / (2 * n) > max_overlap:
        raise CalibrationError(f"{kind.value}: {wrong / (2 * n):.3f} of samples misclassified")
    return Threshold(thr, h, m)


SHARED_VA = 0x7F0000000000


def setup_shared(machine: Machine, va: int = SHARED_VA, writable: bool = False) -> int:
    """Map one shared read-only (by default) user page; returns its va."""
    machine.map(va, vm.PAGE_SIZE, user=True, writable=writable)
    return va


def run_algorithm1(machine: Machine, iterations: int, kind: ProbeKind = ProbeKind.FlushDemote,
                   threshold: Threshold | None = None, victim_core: int | None = None,
                   va: int | None = None) -> float:
    """Attacker/victim loop; the victim touches the line on even iterations.

    The attacker and victim run as siblings of core 0 unless ``victim_core``
    puts the victim on another physical core. Returns the fraction of
    iterations classified correctly.
    """
    kind = ProbeKind(kind)
    if va is None:
        va = setup_shared(machine, writable=kind is ProbeKind.StreamReload)
    thr = threshold or table_threshold(machine, kind)
    att = machine.thread("attacker", 0, 0)
    vic = machine.thread("victim", 0 if victim_core is None else victim_core, 1)
    correct = [0]
    sched = Scheduler(machine)
    sched.barrier("flushed", 2)
    sched.barrier("accessed", 2)

    def attacker(th):
        for i in range(iterations):
            reset(machine, th, kind, va)
            yield Wait("flushed")
            yield Wait("accessed")
            bit = probe(machine, th, kind, va, thr)
            correct[0] += bit == (i % 2 == 0)

    def victim(th):
        for i in range(iterations):
            yield Wait("flushed")
            if i % 2 == 0:
                machine.execute(th, load(va))
            yield Wait("accessed")

    sched.spawn(att, attacker)
    sched.spawn(vic, victim)
    sched.run()
    return correct[0] / iterations


def demote_time(machine: Machine, th: Thread, va: int, repeats: int = 100,
                context: str = "tlb") -> float:
    """Mean CLDEMOTE latency over ``repeats`` back-to-back probes."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    lat, _ = machine.repeat(th, cldemote(va), repeats, context=context)
    return float(lat.mean())


def permission_probe(machine: Machine, th: Thread, va: int, n: int = 10_000) -> dict:
    """Mean prefetch/cldemote latency on ``va`` with a cold and a warm TLB."""
    out = {}
    for name, ins in (("prefetch", prefetch(va)), ("cldemote", cldemote(va))):
        cold = np.empty(n)
        for i in range(n):
            machine.flush_tlbs(th.core)
            cold[i] = machine.measure(th, ins, context="tlb")
        machine.flush_tlbs(th.core)
        machine.execute(th, ins, context="tlb")
        warm, _ = machine.repeat(th, ins, n, context="tlb")
        out[name] = (float(warm.mean()), float(cold.mean()))
    return out


DEMOTE_STATES = ("L1", "L2", "LLC", "absent")
L1_EVICT_BASE = 0x7E0000000000


def demote_state_program(machine: Machine, va: int, state: str) -> list:
    """One round that puts ``va`` in ``state`` and then demotes it (last op)."""
    if state == "L1":
        prep = [load(va)]
    elif state == "L2":
        # enough L1-congruent loads to push va out of L1 but not out of L2
        ways = machine.cfg.hierarchy.l1d[1]
        base = L1_EVICT_BASE
        machine.map(base, ways * vm.PAGE_SIZE, user=True)
        off = va & (vm.PAGE_SIZE - 1)
        prep = [load(va)] + [load(base + i * vm.PAGE_SIZE + off) for i in range(ways)]
    elif state == "LLC":
        prep = [load(va), cldemote(va)]
    elif state == "absent":
        prep = [clflush(va)]
    else:
        raise ValueError(f"unknown state {state!r}; expected one of {DEMOTE_STATES}")
    return prep + [cldemote(va)]


def demote_state_latencies(machine: Machine, th: Thread, va: int, state: str,
                           n: int = 100_000) -> np.ndarray:
    """n cache-context CLDEMOTE latencies with the line starting in ``state``."""
    return machine.rounds(th, demote_state_program(machine, va, state), n)[:, -1]


TLB_SCAN_BASE = 0x006000000000


def tlb_table_scan(machine: Machine, th: Thread, n: int = 10_000,
                   base: int = TLB_SCAN_BASE) -> list:
    """Map one page per latency-table row and measure it with a warm and cold TLB.

    Returns one dict per row: the page bits, the table means and the
    measured means, each as (hit, miss) for prefetch and cldemote.
    """
    out = []
    for i, (bits, (pf, dm)) in enumerate(machine.profile.tlb.items()):
        p, u, d, nx, a, mt = bits
        va = base + i * (1 << 30)
        machine.map(va, vm.PAGE_SIZE, present=bool(p), user=bool(u), dirty=bool(d),
                    no_execute=bool(nx), accessed=bool(a), memtype=mt)
        got = permission_probe(machine, th, va, n)
        out.append({"bits": bits, "va": va, "prefetch": pf, "cldemote": dm,
                    "measured_prefetch": got["prefetch"],
                    "measured_cldemote": got["cldemote"]})
    return out


PAGE_LEVEL_BASE = 0x00A0000000000000


def page_level_addresses(machine: Machine, base: int = PAGE_LEVEL_BASE) -> list:
    """Five P=0,U=0 addresses whose walks abort at PGD, P4D, PUD, PMD, PT."""
    out = []
    for lvl in range(5):
        va = (base + (lvl << 48)) & vm.VA_MASK
        machine.space.set_entry(va, lvl, vm.PageTableEntry(present=False, user=False,
                                                           accessed=True))
        out.append(va)
    return out


def page_level_scan(machine: Machine, th: Thread, addresses=None, n: int = 100_000) -> dict:
    """Per abort level: (cldemote mean, prefetcht2 mean) in the walk context."""
    addresses = addresses or page_level_addresses(machine)
    out = {}
    for name, va in zip(vm.LEVELS, addresses):
        d, _ = machine.repeat(th, cldemote(va), n, context="walk")
        p, _ = machine.repeat(th, prefetch(va, "t2"), n, context="walk")
        out[name] = (float(d.mean()), float(p.mean()))
    return out


__all__ = [
    "ProbeKind", "Threshold", "CalibrationError", "ProbeFault", "table_threshold",
    "reset", "timed", "probe", "classify", "calibrate", "setup_shared", "run_algorithm1",
    "demote_time", "permission_probe", "page_level_addresses", "page_level_scan",
    "DEMOTE_STATES", "demote_state_program", "demote_state_latencies", "tlb_table_scan",
]
