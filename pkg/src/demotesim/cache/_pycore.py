"""Pure-Python cache hierarchy state machine.

Reference implementation of the hierarchy kernel. The compiled twin in
``_core.pyx`` must produce identical results for every operation; the
differential tests drive both with the same random op streams.

Lines are physical line numbers (``pa >> 6``). Every structure stores a
per-line timestamp; the smallest timestamp in a set is the LRU entry.
"""

import numpy as np

# hit levels returned by load/prefetch_fill and by demote
L1 = 0
L2 = 1
LLC = 2
REMOTE = 3
MEM = 4


def slice_hash(line, slices):
    """XOR-fold physical bits 17 and up into 16 bits, then reduce mod slices."""
    h = line >> 11
    r = 0
    while h:
        r ^= h & 0xFFFF
        h >>= 16
    return r % slices


def _single(mask):
    return mask != 0 and mask & (mask - 1) == 0


class Hierarchy:
    def __init__(self, cores, l1d_sets, l1d_ways, l1i_sets, l1i_ways,
                 l2_sets, l2_ways, llc_sets, llc_ways, dir_ways, slices):
        self.cores = cores
        self.l1d_sets, self.l1d_ways = l1d_sets, l1d_ways
        self.l1i_sets, self.l1i_ways = l1i_sets, l1i_ways
        self.l2_sets, self.l2_ways = l2_sets, l2_ways
        self.llc_sets, self.llc_ways = llc_sets, llc_ways
        self.dir_ways = dir_ways
        self.slices = slices
        self.now = 0
        self.l1d = [[{} for _ in range(l1d_sets)] for _ in range(cores)]
        self.l1i = [[{} for _ in range(l1i_sets)] for _ in range(cores)]
        self.l2 = [[{} for _ in range(l2_sets)] for _ in range(cores)]
        self.llc = [{} for _ in range(slices * llc_sets)]
        # directory entry: [timestamp, private core mask]; mask 0 means llc state
        self.dir = [{} for _ in range(slices * llc_sets)]
        self.dirty = set()

    # -- indexing ---------------------------------------------------------

    def llc_index(self, line):
        return slice_hash(line, self.slices) * self.llc_sets + (line & (self.llc_sets - 1))

    def _tick(self):
        self.now += 1
        return self.now

    # -- internal transitions --------------------------------------------

    def _install_llc(self, idx, line, ts):
        C = self.llc[idx]
        if line in C:
            return
        if len(C) >= self.llc_ways:
            D = self.dir[idx]
            # a copy held privately by exactly one core goes first
            dups = [k for k in C if k in D and _single(D[k][1])]
            if not dups and ts < min(C.values()):
                return  # the incoming line is itself the LRU victim
            pool = dups if dups else C
            v = min(pool, key=C.__getitem__)
            del C[v]
            e = D.get(v)
            if e is not None and not e[1]:
                del D[v]
        C[line] = ts

    def _drop_private(self, core, line):
        self.l2[core][line & (self.l2_sets - 1)].pop(line, None)
        self.l1d[core][line & (self.l1d_sets - 1)].pop(line, None)
        self.l1i[core][line & (self.l1i_sets - 1)].pop(line, None)

    def _dir_alloc(self, idx, line, core):
        now = self._tick()
        D = self.dir[idx]
        e = D.get(line)
        if e is not None:
            e[0] = now
            e[1] |= 1 << core
            return
        if len(D) >= self.dir_ways:
            v = min(D, key=lambda k: D[k][0])
            ts, mask = D.pop(v)
            if mask:
                for c in range(self.cores):
                    if mask >> c & 1:
                        self._drop_private(c, v)
                self._install_llc(idx, v, ts)
        D[line] = [now, 1 << core]

    def _evict_l2(self, core, S2, victim):
        ts = S2.pop(victim)
        self.l1d[core][victim & (self.l1d_sets - 1)].pop(victim, None)
        self.l1i[core][victim & (self.l1i_sets - 1)].pop(victim, None)
        idx = self.llc_index(victim)
        e = self.dir[idx][victim]
        e[1] &= ~(1 << core)
        if not e[1]:
            self._install_llc(idx, victim, ts)

    def _fill_private(self, core, line, now):
        """Shared miss path of load, fetch and prefetch_fill. Returns the level."""
        idx = self.llc_index(line)
        C = self.llc[idx]
        if line in C:
            C[line] = now
            lvl = LLC
        else:
            e = self.dir[idx].get(line)
            lvl = REMOTE if (e is not None and e[1]) else MEM
        self._dir_alloc(idx, line, core)
        S2 = self.l2[core][line & (self.l2_sets - 1)]
        if len(S2) >= self.l2_ways:
            self._evict_l2(core, S2, min(S2, key=S2.__getitem__))
        S2[line] = now
        # the LLC copy of a remote hit lands after the requester's writeback
        if lvl == REMOTE:
            self._install_llc(idx, line, now)
        return lvl

    def _access(self, core, line, l1, l1_sets, l1_ways):
        now = self._tick()
        S1 = l1[core][line & (l1_sets - 1)]
        S2 = self.l2[core][line & (self.l2_sets - 1)]
        if line in S1:
            S1[line] = now
            S2[line] = now
            return L1
        if line in S2:
            S2[line] = now
            lvl = L2
        else:
            lvl = self._fill_private(core, line, now)
        if len(S1) >= l1_ways:
            del S1[min(S1, key=S1.__getitem__)]
        S1[line] = now
        return lvl

    # -- public operations -------------------------------------------------

    def load(self, core, line):
        return self._access(core, line, self.l1d, self.l1d_sets, self.l1d_ways)

    def fetch(self, core, line):
        return self._access(core, line, self.l1i, self.l1i_sets, self.l1i_ways)

    def store(self, core, line):
        lvl = self.load(core, line)
        idx = self.llc_index(line)
        e = self.dir[idx][line]
        others = e[1] & ~(1 << core)
        for c in range(self.cores):
            if others >> c & 1:
                self._drop_private(c, line)
        e[1] = 1 << core
        self.llc[idx].pop(line, None)
        self.dirty.add(line)
        return lvl

    def prefetch_fill(self, core, line):
        now = self._tick()
        if line in self.l1d[core][line & (self.l1d_sets - 1)]:
            return L1
        S2 = self.l2[core][line & (self.l2_sets - 1)]
        if line in S2:
            S2[line] = now
            return L2
        return self._fill_private(core, line, now)

    def demote(self, core, line):
        S2 = self.l2[core][line & (self.l2_sets - 1)]
        if line not in S2:
            idx = self.llc_index(line)
            if line in self.llc[idx]:
                return LLC
            e = self.dir[idx].get(line)
            return REMOTE if (e is not None and e[1]) else MEM
        now = self._tick()
        S1 = self.l1d[core][line & (self.l1d_sets - 1)]
        I1 = self.l1i[core][line & (self.l1i_sets - 1)]
        where = L1 if (line in S1 or line in I1) else L2
        del S2[line]
        S1.pop(line, None)
        I1.pop(line, None)
        idx = self.llc_index(line)
        self.dir[idx][line][1] &= ~(1 << core)
        self._install_llc(idx, line, now)
        return where

    def flush(self, line):
        cached = False
        for c in range(self.cores):
            if line in self.l2[c][line & (self.l2_sets - 1)]:
                cached = True
                self._drop_private(c, line)
        idx = self.llc_index(line)
        if self.llc[idx].pop(line, None) is not None:
            cached = True
        self.dir[idx].pop(line, None)
        self.dirty.discard(line)
        return cached

    def stream_store(self, line):
        return self.flush(line)

    # -- bulk kernels --------------------------------------------------------

    def evtest(self, target, members, flush_lines, mode, main, helper, probe):
        """One eviction test: flush, place target and members, probe target.

        mode 0 places a line with load+demote on ``main``; mode 1 loads it
        on ``helper`` then on ``main``. Returns (probe level, op counts) where
        counts[0:5] are load levels, counts[5:10] demote outcomes and
        counts[10:12] flushes of absent/cached lines.
        """
        counts = np.zeros(12, dtype=np.int64)
        for x in flush_lines:
            counts[10 + self.flush(int(x))] += 1
        self._place(int(target), mode, main, helper, counts)
        for x in members:
            self._place(int(x), mode, main, helper, counts)
        return self.load(probe, int(target)), counts

    def _place(self, x, mode, main, helper, counts):
        if mode == 0:
            counts[self.load(main, x)] += 1
            counts[5 + self.demote(main, x)] += 1
        else:
            counts[self.load(helper, x)] += 1
            counts[self.load(main, x)] += 1

    def prime_probe(self, prime_core, lines, probe_core, target, iters, preload, stable):
        """Repeat (load every prime line, then load target) until steady.

        Stops after ``stable`` consecutive iterations with an identical level
        trace, or after ``iters`` iterations. Returns the target levels of the
        simulated iterations.
        """
        target = int(target)
        lines = [int(x) for x in lines]
        if preload:
            self.load(probe_core, target)
        out = []
        prev = None
        same = 0
        for _ in range(iters):
            trace = [self.load(prime_core, x) for x in lines]
            lt = self.load(probe_core, target)
            trace.append(lt)
            out.append(lt)
            if trace == prev:
                same += 1
                if same + 1 >= stable:
                    break
            else:
                same = 0
                prev = trace
        return np.asarray(out, dtype=np.int64)

    # -- oracle views ----------------------------------------------------------

    def locate(self, line):
        s1 = line & (self.l1d_sets - 1)
        si = line & (self.l1i_sets - 1)
        s2 = line & (self.l2_sets - 1)
        idx = self.llc_index(line)
        C = self.llc[idx]
        e = self.dir[idx].get(line)
        llc_rank = -1
        if line in C:
            llc_rank = sum(1 for t in C.values() if t > C[line])
        return {
            "l1d": [c for c in range(self.cores) if line in self.l1d[c][s1]],
            "l1i": [c for c in range(self.cores) if line in self.l1i[c][si]],
            "l2": [c for c in range(self.cores) if line in self.l2[c][s2]],
            "llc": line in C,
            "llc_ts": C.get(line, -1),
            "llc_rank": llc_rank,
            "dir_mask": -1 if e is None else e[1],
            "dir_ts": -1 if e is None else e[0],
            "dirty": line in self.dirty,
        }

    def dir_count(self, idx):
        return len(self.dir[idx])

    def snapshot(self):
        """Canonical dump of every structure, for differential comparison."""
        out = []
        for name, table in (("l1d", self.l1d), ("l1i", self.l1i), ("l2", self.l2)):
            for c, sets in enumerate(table):
                for s, S in enumerate(sets):
                    for line, ts in S.items():
                        out.append((name, c, s, line, ts))
        for i, C in enumerate(self.llc):
            for line, ts in C.items():
                out.append(("llc", 0, i, line, ts))
        for i, D in enumerate(self.dir):
            for line, (ts, mask) in D.items():
                out.append(("dir", mask, i, line, ts))
        out.sort()
        return out, sorted(self.dirty), self.now

