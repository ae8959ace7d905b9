"""End-to-end attacks: the window-based covert channel and the KASLR slot scan.

The channel runs sender and receiver as SMT siblings sharing one physical
core, so the agreed line lives in (or leaves) a single set of private
caches. Each side is an independent timeline on the shared cycle counter;
the only thing they share is the line's cache state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import vm
from .config import ConfigError, MachineConfig
from .machine import Machine, cldemote
from .primitives import ProbeKind, table_threshold
from .rng import Streams

INF = math.inf


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def bsc_capacity(raw_rate: float, ber: float) -> float:
    """Binary-symmetric-channel capacity in bits/s; ``ber`` is clamped to 0.5."""
    return raw_rate * (1.0 - binary_entropy(min(ber, 0.5)))


# -- covert channel ------------------------------------------------------------


@dataclass
class ChannelConfig:
    window_cycles: int = 700
    message: np.ndarray | None = None
    primitive: ProbeKind = ProbeKind.FlushDemote
    bits: int = 1_000_000

    def __post_init__(self):
        self.primitive = ProbeKind(self.primitive)
        if self.primitive is ProbeKind.DemoteTime:
            raise ConfigError("DemoteTime is not a cache-line channel primitive")
        if self.message is not None:
            self.message = np.asarray(self.message, dtype=np.uint8)
            self.bits = len(self.message)
        if self.bits < 1:
            raise ConfigError("message must hold at least one bit")


@dataclass
class ChannelReport:
    window_cycles: int
    primitive: str
    bits: int
    errors: int
    raw_rate: float
    ber: float
    capacity: float
    clock_ghz: float
    received: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.ber <= 1.0:
            raise ValueError("ber out of range")
        if self.capacity > self.raw_rate + 1e-9:
            raise ValueError("capacity exceeds raw rate")

    def as_dict(self) -> dict:
        return {"window_cycles": self.window_cycles, "primitive": self.primitive,
                "bits": self.bits, "errors": self.errors, "raw_rate_bps": self.raw_rate,
                "ber": self.ber, "capacity_bps": self.capacity, "clock_ghz": self.clock_ghz}


def balanced_message(bits: int, seed: int) -> np.ndarray:
    """``bits`` bits with exactly floor(bits/2) ones, in random order."""
    msg = np.zeros(bits, dtype=np.uint8)
    msg[: bits // 2] = 1
    Streams(seed).generator("channel:message").shuffle(msg)
    return msg


def round_latency(profile, kind: ProbeKind) -> int:
    """Worst-case receiver round: slowest timed op plus slowest reset."""
    kind = ProbeKind(kind)
    probe = max(profile.probe_tables[kind.value])
    if kind is ProbeKind.FlushFlush:
        return probe
    if kind is ProbeKind.StreamReload:
        return probe + profile.cache["MOVNT"]["any"]
    return probe + max(profile.cache["CLFLUSH"].values())


class _Line:
    """The agreed line on the shared physical core.

    ``fill_at`` is when the private copy lands (INF: none, may lie in the
    future while a miss is in flight); ``in_llc`` tracks a demoted copy.
    """

    __slots__ = ("fill_at", "in_llc")

    def __init__(self):
        self.fill_at = INF
        self.in_llc = False

    def private(self, t: float) -> bool:
        return self.fill_at <= t

    def clear(self, t: float) -> None:
        if self.fill_at <= t:
            self.fill_at = INF
        self.in_llc = False


class _Channel:
    def __init__(self, machine: Machine, cfg: ChannelConfig, message: np.ndarray):
        self.m = machine
        p = machine.profile
        self.p = p
        self.kind = cfg.primitive
        self.W = cfg.window_cycles
        self.msg = message
        timing = machine.cfg.channel
        self.rx_offset = timing.rx_offset
        self.gap = timing.tx_gap
        self.sigma = p.noise_sigma
        self.hit_mean, self.miss_mean = p.probe_tables[self.kind.value]
        load = p.cache["LOAD"]
        self.l1, self.llc, self.mem = load["L1"], load["LLC"], load["MEM"]
        self.flush_cached = p.cache["CLFLUSH"]["cached"]
        self.flush_absent = p.cache["CLFLUSH"]["absent"]
        self.movnt = p.cache["MOVNT"]["any"]
        self.tx_noise = machine.streams.normal("channel:sender")
        self.rx_noise = machine.streams.normal("channel:receiver")
        n = len(message)
        sync = machine.streams.normal("channel:sync").take(n + 1)
        self.offsets = timing.sync_jitter * sync
        self.line = _Line()
        # sender state
        self.ones = np.flatnonzero(message)
        self.k = 0          # next 1-window index into self.ones
        self.ts = -INF      # sender busy until
        self.cur = None     # active (start, end) interval

    def _lat(self, mean: float, noise) -> float:
        return max(float(np.rint(mean + self.sigma * noise.next())), 1.0)

    def _next_interval(self) -> bool:
        if self.k >= len(self.ones):
            self.cur = None
            return False
        w = int(self.ones[self.k])
        self.k += 1
        start = w * self.W + self.offsets[w]
        self.cur = (start, start + self.W)
        return True

    def advance_sender(self, until: float) -> None:
        """Issue every sender load with issue time < ``until``."""
        line = self.line
        cad = self.l1 + self.gap
        while True:
            if self.cur is None and not self._next_interval():
                return
            a, b = self.cur
            t = max(self.ts, a)
            if t >= b:
                self.cur = None
                continue
            if t >= until:
                return
            if line.private(t):
                # hits change nothing; jump to the next load at or after ``until``
                # (the sum of k noisy hit latencies is drawn in one go)
                stop = min(until, b)
                k = max(1, math.ceil((stop - t) / cad))
                spread = self.sigma * math.sqrt(k) * self.tx_noise.next()
                self.ts = t + max(k * cad + round(spread), 1)
                continue
            if line.fill_at < INF:
                # hit under an in-flight miss
                self.ts = line.fill_at + self.gap
                continue
            lat = self._lat(self.llc if line.in_llc else self.mem, self.tx_noise)
            line.fill_at = t + lat
            self.ts = t + lat + self.gap

    def receive(self, t: float) -> tuple[int, float]:
        """One receiver round at ``t``; returns (accessed bit, round end)."""
        line = self.line
        kind = self.kind
        self.advance_sender(t)
        if kind is ProbeKind.FlushDemote:
            hit = line.private(t)
            lat = self._lat(self.hit_mean if hit else self.miss_mean, self.rx_noise)
            if hit:
                line.fill_at = INF
                line.in_llc = True
        elif kind is ProbeKind.FlushFlush:
            hit = line.private(t) or line.in_llc
            lat = self._lat(self.hit_mean if hit else self.miss_mean, self.rx_noise)
            line.clear(t)
            return int(lat > self.threshold), t + lat
        else:  # reload kinds
            hit = line.private(t)
            lat = self._lat(self.hit_mean if hit else self.miss_mean, self.rx_noise)
            if not hit and line.fill_at == INF:
                line.fill_at = t + lat
        bit = int(lat > self.threshold) if kind is ProbeKind.FlushDemote \
            else int(lat < self.threshold)
        t += lat
        self.advance_sender(t)
        if kind is ProbeKind.StreamReload:
            rl = self._lat(self.movnt, self.rx_noise)
        else:
            cached = line.private(t) or line.in_llc
            rl = self._lat(self.flush_cached if cached else self.flush_absent, self.rx_noise)
        line.clear(t)
        return bit, t + rl

    def run(self) -> np.ndarray:
        self.threshold = table_threshold(self.m, self.kind).cycles
        n = len(self.msg)
        out = np.empty(n, dtype=np.uint8)
        busy = -INF
        for w in range(n + 1):
            t = max(w * self.W + self.rx_offset, busy)
            bit, busy = self.receive(t)
            if w:
                out[w - 1] = bit
        return out


def channel_run(cfg: ChannelConfig | None = None, seed: int = 0,
                machine_cfg: MachineConfig | None = None) -> ChannelReport:
    """Transmit a message window by window and score it."""
    cfg = cfg or ChannelConfig()
    m = Machine(machine_cfg, seed=seed)
    p = m.profile
    need = round_latency(p, cfg.primitive)
    if cfg.window_cycles <= need:
        raise ConfigError(f"window {cfg.window_cycles} cycles does not fit a "
                          f"{cfg.primitive.value} round ({need} cycles)")
    msg = cfg.message if cfg.message is not None else balanced_message(cfg.bits, m.seed)
    got = _Channel(m, cfg, msg).run()
    errors = int(np.count_nonzero(got != msg))
    n = len(msg)
    raw = p.clock_ghz * 1e9 / cfg.window_cycles
    ber = errors / n
    return ChannelReport(cfg.window_cycles, cfg.primitive.value, n, errors, raw, ber,
                         bsc_capacity(raw, ber), p.clock_ghz, got)


def channel_sweep(windows, bits: int = 100_000, primitive=ProbeKind.FlushDemote,
                  seed: int = 0, machine_cfg: MachineConfig | None = None) -> list:
    """One report per window size; windows too small for a round are skipped."""
    out = []
    need = round_latency((machine_cfg or MachineConfig()).profile, primitive)
    for w in windows:
        if w <= need:
            continue
        out.append(channel_run(ChannelConfig(int(w), primitive=primitive, bits=bits), seed,
                               machine_cfg))
    return out


def capacity_peak(reports) -> ChannelReport:
    return max(reports, key=lambda r: r.capacity)


def single_interior_maximum(values) -> bool:
    """True if the sequence rises to one peak (not at either end) then falls."""
    v = list(values)
    if len(v) < 3:
        return False
    i = int(np.argmax(v))
    if i in (0, len(v) - 1):
        return False
    return all(a <= b for a, b in zip(v[:i], v[1:i + 1])) and \
        all(a >= b for a, b in zip(v[i:], v[i + 1:]))


# -- KASLR ---------------------------------------------------------------------

SLOT_SIZE = 2 << 20
REGION_START = 0xFFFFFFFF80000000
REGION_END = 0xFFFFFFFFC0000000
SLOTS = (REGION_END - REGION_START) // SLOT_SIZE


class KernelNotFound(LookupError):
    pass


@dataclass(frozen=True)
class KaslrLayout:
    start_slot: int
    kernel_slots: int = 22
    region_start: int = REGION_START
    slot_size: int = SLOT_SIZE
    slots: int = SLOTS

    def __post_init__(self):
        if not 1 <= self.kernel_slots <= self.slots:
            raise ValueError("kernel_slots must be in [1, slots]")
        if not 0 <= self.start_slot <= self.slots - self.kernel_slots:
            raise ValueError("kernel does not fit inside the region")

    @property
    def base(self) -> int:
        return self.region_start + self.start_slot * self.slot_size

    def slot_va(self, slot: int) -> int:
        return self.region_start + slot * self.slot_size

    @property
    def occupied(self) -> range:
        return range(self.start_slot, self.start_slot + self.kernel_slots)


def kaslr_randomize(machine: Machine, kernel_slots: int | None = None,
                    seed: int | None = None) -> KaslrLayout:
    """Pick a uniform start slot and map the kernel image (P=1, U=0, A=1)."""
    k = machine.cfg.kaslr.kernel_slots if kernel_slots is None else kernel_slots
    if not 1 <= k <= SLOTS:
        raise ValueError(f"kernel_slots must be in [1, {SLOTS}]")
    gen = Streams(machine.seed if seed is None else seed).generator("kaslr:slot")
    start = int(gen.integers(0, SLOTS - k + 1))
    layout = KaslrLayout(start, k)
    vm.map_region(machine.space, layout.base & vm.VA_MASK, k * SLOT_SIZE,
                  vm.PageTableEntry(present=True, user=False, accessed=True))
    return layout


@dataclass
class KaslrScan:
    means: np.ndarray
    cycles: int
    faults: int
    probes: int = 0

    def millis(self, clock_ghz: float) -> float:
        return self.cycles / (clock_ghz * 1e6)


def kaslr_scan(machine: Machine, th=None, repeats: int = 100,
               region_start: int = REGION_START, slots: int = SLOTS) -> KaslrScan:
    """Demote+Time on the first address of every slot."""
    th = th or machine.threads.get("kaslr") or machine.thread("kaslr", 0)
    means = np.empty(slots)
    cycles = 0
    faults = 0
    probes = 0
    for s in range(slots):
        va = (region_start + s * SLOT_SIZE) & vm.VA_MASK
        lat, f = machine.repeat(th, cldemote(va), repeats, context="tlb")
        means[s] = lat.mean()
        cycles += int(lat.sum())
        faults += f
        probes += len(lat)
    return KaslrScan(means, cycles, faults, probes)


def kaslr_locate(latencies, threshold: float = 131, region_start: int = REGION_START,
                 slot_size: int = SLOT_SIZE) -> int:
    """Base of the longest run of below-threshold slots."""
    low = np.asarray(latencies) < threshold
    best_len = best_start = 0
    run = 0
    for i, v in enumerate(low):
        run = run + 1 if v else 0
        if run > best_len:
            best_len, best_start = run, i - run + 1
    if best_len == 0:
        raise KernelNotFound("no slot below the latency threshold")
    return region_start + best_start * slot_size


@dataclass
class KaslrEvaluation:
    trials: int
    correct: int
    mean_cycles: float
    mean_ms: float
    bases: list = field(repr=False, default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.trials


def kaslr_evaluate(trials: int = 1000, reboots: int = 10, seed: int = 0,
                   machine_cfg: MachineConfig | None = None, repeats: int = 100,
                   slots: int = SLOTS) -> KaslrEvaluation:
    """Scan ``trials`` times, re-randomizing the layout every trials/reboots."""
    if reboots < 1 or trials % reboots:
        raise ValueError("trials must be a positive multiple of reboots")
    per = trials // reboots
    correct = 0
    cycles = []
    bases = []
    cfg = machine_cfg or MachineConfig()
    seeds = np.random.SeedSequence(seed).generate_state(reboots)
    for r in range(reboots):
        m = Machine(cfg, seed=int(seeds[r]))
        layout = kaslr_randomize(m)
        th = m.thread("kaslr", 0)
        for _ in range(per):
            scan = kaslr_scan(m, th, repeats, slots=slots)
            cycles.append(scan.cycles)
            try:
                found = kaslr_locate(scan.means, cfg.kaslr.threshold)
            except KernelNotFound:
                found = None
            bases.append(found)
            correct += found == layout.base
    mean = float(np.mean(cycles))
    return KaslrEvaluation(trials, correct, mean, mean / (cfg.profile.clock_ghz * 1e6), bases)


__all__ = [
    "binary_entropy", "bsc_capacity", "ChannelConfig", "ChannelReport", "balanced_message",
    "round_latency", "channel_run", "channel_sweep", "capacity_peak",
    "single_interior_maximum", "KaslrLayout", "KernelNotFound", "kaslr_randomize",
    "KaslrScan", "kaslr_scan", "kaslr_locate", "KaslrEvaluation", "kaslr_evaluate",
    "SLOT_SIZE", "REGION_START", "REGION_END", "SLOTS",
]
