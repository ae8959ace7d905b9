"""Virtual memory: 5-level page tables, split data TLBs, paging-structure caches.

Addresses are 56-bit. A walk starts at the root table or, when a
paging-structure cache (PSC) holds a prefix of the address, at the deepest
cached table. The walk stops at the first non-present entry.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field, replace

VA_BITS = 56
VA_MASK = (1 << VA_BITS) - 1
PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
LEVELS = ("PGD", "P4D", "PUD", "PMD", "PT")
# shift of the index field for each level
LEVEL_SHIFT = (48, 39, 30, 21, 12)

WALK_DEPTHS = ("none", "from_PGD", "from_P4D", "from_PUD", "from_PMD", "from_PT")
DEFAULT_WALK_LADDER = (137, 131, 125, 119, 113)


class MemType(str, enum.Enum):
    WB = "write-back"
    WP = "write-protected"
    UC = "uncacheable"


class MappingConflict(ValueError):
    pass


class FrameError(LookupError):
    pass


def decompose_va(va: int) -> tuple[int, int, int, int, int, int]:
    """Split ``va`` into (PGD, P4D, PUD, PMD, PT, offset)."""
    va &= VA_MASK
    return tuple((va >> s) & 0x1FF for s in LEVEL_SHIFT) + (va & 0xFFF,)


def recompose_va(pgd: int, p4d: int, pud: int, pmd: int, pt: int, offset: int) -> int:
    va = offset & 0xFFF
    for idx, s in zip((pgd, p4d, pud, pmd, pt), LEVEL_SHIFT):
        va |= (idx & 0x1FF) << s
    return va


@dataclass
class PageTableEntry:
    present: bool = True
    user: bool = True
    dirty: bool = True
    no_execute: bool = True
    accessed: bool = True
    memtype: MemType = MemType.WB
    writable: bool = True
    _frame: int | None = None
    child: dict | None = field(default=None, repr=False, compare=False)

    @property
    def frame(self) -> int:
        if not self.present or self._frame is None:
            raise FrameError("non-present entry has no frame")
        return self._frame

    def bits(self) -> tuple:
        """Permission/memtype key used by latency tables."""
        return (int(self.present), int(self.user), int(self.dirty),
                int(self.no_execute), int(self.accessed), self.memtype)

    def same_type(self, other: "PageTableEntry") -> bool:
        return self.bits() == other.bits() and self.writable == other.writable


# stands in for an entry that was never written: every bit clear
EMPTY_ENTRY = PageTableEntry(present=False, user=False, dirty=False,
                             no_execute=False, accessed=False)


class FrameAllocator:
    """Hands out distinct physical frames in a random order."""

    def __init__(self, rng, frame_bits: int = 24):
        self.rng = rng
        self.limit = 1 << frame_bits
        self.used: set[int] = set()

    def __call__(self) -> int:
        while True:
            f = int(self.rng.integers(1, self.limit))
            if f not in self.used:
                self.used.add(f)
                return f


class _SequentialFrames:
    def __init__(self):
        self.next = 1

    def __call__(self) -> int:
        f = self.next
        self.next += 1
        return f


KERNEL_REGION = (0xFFFFFFFF80000000 & VA_MASK, 0xFFFFFFFFC0000000 & VA_MASK)


class AddressSpace:
    def __init__(self, alloc=None, kernel_region=KERNEL_REGION):
        self.root: dict[int, PageTableEntry] = {}
        self.kernel_region = kernel_region
        self.alloc = alloc or _SequentialFrames()

    def _table(self, va: int, depth: int, user: bool, accessed: bool) -> dict:
        """Return the table at ``depth`` on the path of ``va``, creating it."""
        node = self.root
        idx = decompose_va(va)
        for lvl in range(depth):
            e = node.get(idx[lvl])
            if e is None or e.child is None:
                if e is not None and e.present and e.child is None:
                    raise MappingConflict(f"{LEVELS[lvl]} entry for {va:#x} is not a table")
                e = PageTableEntry(present=True, user=user, dirty=False, no_execute=False,
                                   accessed=accessed, child={})
                node[idx[lvl]] = e
            elif user and not e.user:
                e.user = True
            node = e.child
        return node

    def set_entry(self, va: int, level: int, entry: PageTableEntry,
                  path_accessed: bool = True) -> None:
        """Install ``entry`` at ``level`` on the path of ``va`` (builds the path)."""
        node = self._table(va, level, entry.user, path_accessed)
        node[decompose_va(va)[level]] = entry

    def leaf(self, va: int):
        """Return (entry, level) where a walk of ``va`` terminates."""
        node = self.root
        idx = decompose_va(va)
        for lvl in range(5):
            e = node.get(idx[lvl])
            if e is None:
                return EMPTY_ENTRY, lvl
            if not e.present or lvl == 4:
                return e, lvl
            node = e.child
        raise AssertionError("unreachable")

    def path(self, va: int) -> list:
        """Present entries traversed by a walk, plus the terminal entry."""
        out = []
        node = self.root
        idx = decompose_va(va)
        for lvl in range(5):
            e = node.get(idx[lvl])
            if e is None:
                break
            out.append(e)
            if not e.present or lvl == 4:
                break
            node = e.child
        return out

    def pa(self, va: int) -> int | None:
        e, lvl = self.leaf(va)
        if lvl != 4 or not e.present:
            return None
        return (e.frame << PAGE_SHIFT) | (va & (PAGE_SIZE - 1))


def map_region(space: AddressSpace, va_start: int, length: int, bits: PageTableEntry,
               path_accessed: bool = True, frames=None) -> list[int]:
    """Map ``length`` bytes at ``va_start`` with leaves copied from ``bits``.

    Present leaves get a fresh frame from the space allocator unless
    ``frames`` is given. Remapping a page with identical bits keeps it.
    Returns the frame list (None for non-present leaves).
    """
    if va_start % PAGE_SIZE:
        raise ValueError(f"va_start {va_start:#x} is not page aligned")
    npages = -(-length // PAGE_SIZE)
    out = []
    for i in range(npages):
        va = (va_start + i * PAGE_SIZE) & VA_MASK
        table = space._table(va, 4, bits.user, path_accessed)
        pt = decompose_va(va)[4]
        old = table.get(pt)
        if old is not None:
            if not old.same_type(bits):
                raise MappingConflict(f"page {va:#x} already mapped with different bits")
            out.append(old._frame)
            continue
        frame = None
        if bits.present:
            frame = frames[i] if frames is not None else space.alloc()
        table[pt] = replace(bits, _frame=frame, child=None)
        out.append(frame)
    return out


def set_accessed(space: AddressSpace, va: int, dirty: bool = False) -> None:
    """Architectural access: set A along the present path (and D on a store)."""
    path = space.path(va)
    for e in path:
        if e.present:
            e.accessed = True
    if dirty and path and len(path) == 5 and path[-1].present:
        path[-1].dirty = True


@dataclass
class TranslationOutcome:
    kind: str
    tlb_hit: bool
    walk_depth: str
    walks_performed: int
    frame: int | None
    latency_contrib: int
    events: list
    entry: PageTableEntry = field(default=EMPTY_ENTRY, repr=False)
    backed: bool = False
    filled: bool = False

    @property
    def key(self) -> tuple:
        """Everything that distinguishes one outcome from another."""
        return (self.tlb_hit, self.walk_depth, self.walks_performed, self.frame,
                self.backed, self.filled)


class TlbState:
    def __init__(self, entries: int = 64, psc_entries: int = 16,
                 ladder=DEFAULT_WALK_LADDER):
        self.entries = entries
        self.psc_entries = psc_entries
        self.ladder = tuple(ladder)
        self.load_tlb: OrderedDict = OrderedDict()   # vpn -> (frame, backed, entry)
        self.store_tlb: OrderedDict = OrderedDict()  # vpn -> (frame, entry)
        # psc[k] caches the table that a walk starting at level k+1 would read
        self.psc = [OrderedDict() for _ in range(4)]

    @staticmethod
    def _put(d: OrderedDict, key, value, cap: int) -> None:
        d[key] = value
        d.move_to_end(key)
        if len(d) > cap:
            d.popitem(last=False)


def flush_tlbs(state: TlbState) -> None:
    state.load_tlb.clear()
    state.store_tlb.clear()
    for p in state.psc:
        p.clear()


def walk_cost(depth: str, ladder=DEFAULT_WALK_LADDER) -> int:
    if depth == "none":
        return 0
    return ladder[WALK_DEPTHS.index(depth) - 1]


def translate(state: TlbState, space: AddressSpace, kind: str, va: int) -> TranslationOutcome:
    va &= VA_MASK
    vpn = va >> PAGE_SHIFT
    if kind == "load":
        hit = state.load_tlb.get(vpn)
        if hit is not None:
            state.load_tlb.move_to_end(vpn)
            return TranslationOutcome("load", True, "none", 0, hit[0], 0, [], hit[2], hit[1])
    elif kind == "store":
        hit = state.store_tlb.get(vpn)
        if hit is not None:
            state.store_tlb.move_to_end(vpn)
            return TranslationOutcome("store", True, "none", 0, hit[0], 0, [], hit[1], True)
    else:
        raise ValueError(f"unknown translation kind {kind!r}")

    # deepest paging-structure cache holding a prefix of va
    start, node = 0, space.root
    for k in range(3, -1, -1):
        key = va >> LEVEL_SHIFT[k]
        t = state.psc[k].get(key)
        if t is not None:
            state.psc[k].move_to_end(key)
            start, node = k + 1, t
            break

    idx = decompose_va(va)
    ok = True
    entry = EMPTY_ENTRY
    for lvl in range(start, 5):
        e = node.get(idx[lvl])
        if e is None:
            entry = EMPTY_ENTRY
            break
        entry = e
        if not e.present:
            break
        ok = ok and e.accessed
        if lvl == 4:
            break
        if ok:
            TlbState._put(state.psc[lvl], va >> LEVEL_SHIFT[lvl], e.child, state.psc_entries)
        node = e.child
    backed = entry.present and entry.child is None and entry._frame is not None
    frame = entry._frame if backed else None
    depth = WALK_DEPTHS[start + 1]
    tag = "dtlb_load" if kind == "load" else "dtlb_store"
    filled = False
    if kind == "load":
        walks = 1
        if ok:
            TlbState._put(state.load_tlb, vpn, (frame, backed, entry), state.entries)
            filled = True
    elif backed:
        walks = 1
        if ok:
            TlbState._put(state.store_tlb, vpn, (frame, entry), state.entries)
            filled = True
    else:
        walks = 2
    cost = walk_cost(depth, state.ladder)
    return TranslationOutcome(kind, False, depth, walks, frame, cost * walks,
                              [tag] * walks, entry, backed, filled)


__all__ = [
    "VA_BITS", "VA_MASK", "PAGE_SIZE", "LEVELS", "WALK_DEPTHS", "DEFAULT_WALK_LADDER",
    "MemType", "MappingConflict", "FrameError", "PageTableEntry", "EMPTY_ENTRY",
    "AddressSpace", "FrameAllocator", "TlbState", "TranslationOutcome", "KERNEL_REGION",
    "decompose_va", "recompose_va", "map_region", "set_accessed", "translate",
    "walk_cost", "flush_tlbs",
]
