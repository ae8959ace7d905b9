# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled cache hierarchy state machine.

Same operations and results as ``_pycore.Hierarchy``, stored in flat int64
arrays instead of dicts. A slot holding line -1 is empty.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()

cdef enum:
    L1 = 0
    L2 = 1
    LLC = 2
    REMOTE = 3
    MEM = 4


cpdef int slice_hash(int64_t line, int slices):
    cdef int64_t h = line >> 11
    cdef int64_t r = 0
    while h:
        r ^= h & 0xFFFF
        h >>= 16
    return <int>(r % slices)


cdef inline Py_ssize_t _find(int64_t* a, Py_ssize_t base, int ways, int64_t line):
    cdef int w
    for w in range(ways):
        if a[base + w] == line:
            return base + w
    return -1


cdef inline Py_ssize_t _empty(int64_t* a, Py_ssize_t base, int ways):
    cdef int w
    for w in range(ways):
        if a[base + w] == -1:
            return base + w
    return -1


cdef inline Py_ssize_t _lru(int64_t* ts, Py_ssize_t base, int ways):
    cdef int w
    cdef Py_ssize_t best = base
    for w in range(1, ways):
        if ts[base + w] < ts[best]:
            best = base + w
    return best


cdef inline bint _single(int64_t mask):
    return mask != 0 and (mask & (mask - 1)) == 0


cdef class Hierarchy:
    cdef readonly int cores, l1d_sets, l1d_ways, l1i_sets, l1i_ways
    cdef readonly int l2_sets, l2_ways, llc_sets, llc_ways, dir_ways, slices
    cdef public int64_t now
    cdef object _arrays
    cdef int64_t* l1d_line
    cdef int64_t* l1d_ts
    cdef int64_t* l1i_line
    cdef int64_t* l1i_ts
    cdef int64_t* l2_line
    cdef int64_t* l2_ts
    cdef int64_t* llc_line
    cdef int64_t* llc_ts
    cdef int64_t* dir_line
    cdef int64_t* dir_ts
    cdef int64_t* dir_mask
    cdef public object dirty

    def __init__(self, int cores, int l1d_sets, int l1d_ways, int l1i_sets, int l1i_ways,
                 int l2_sets, int l2_ways, int llc_sets, int llc_ways, int dir_ways, int slices):
        self.cores = cores
        self.l1d_sets = l1d_sets
        self.l1d_ways = l1d_ways
        self.l1i_sets = l1i_sets
        self.l1i_ways = l1i_ways
        self.l2_sets = l2_sets
        self.l2_ways = l2_ways
        self.llc_sets = llc_sets
        self.llc_ways = llc_ways
        self.dir_ways = dir_ways
        self.slices = slices
        self.now = 0
        self.dirty = set()
        sizes = {
            "l1d": cores * l1d_sets * l1d_ways,
            "l1i": cores * l1i_sets * l1i_ways,
            "l2": cores * l2_sets * l2_ways,
            "llc": slices * llc_sets * llc_ways,
            "dir": slices * llc_sets * dir_ways,
        }
        arrs = {}
        for name, n in sizes.items():
            arrs[name + "_line"] = np.full(n, -1, dtype=np.int64)
            arrs[name + "_ts"] = np.zeros(n, dtype=np.int64)
        arrs["dir_mask"] = np.zeros(sizes["dir"], dtype=np.int64)
        self._arrays = arrs
        self.l1d_line = self._ptr("l1d_line")
        self.l1d_ts = self._ptr("l1d_ts")
        self.l1i_line = self._ptr("l1i_line")
        self.l1i_ts = self._ptr("l1i_ts")
        self.l2_line = self._ptr("l2_line")
        self.l2_ts = self._ptr("l2_ts")
        self.llc_line = self._ptr("llc_line")
        self.llc_ts = self._ptr("llc_ts")
        self.dir_line = self._ptr("dir_line")
        self.dir_ts = self._ptr("dir_ts")
        self.dir_mask = self._ptr("dir_mask")

    cdef int64_t* _ptr(self, name):
        cdef cnp.ndarray a = self._arrays[name]
        return <int64_t*> cnp.PyArray_DATA(a)

    # -- indexing ---------------------------------------------------------

    cpdef Py_ssize_t llc_index(self, int64_t line):
        return slice_hash(line, self.slices) * self.llc_sets + (line & (self.llc_sets - 1))

    cdef inline Py_ssize_t _l1d_base(self, int core, int64_t line):
        return (core * self.l1d_sets + (line & (self.l1d_sets - 1))) * self.l1d_ways

    cdef inline Py_ssize_t _l1i_base(self, int core, int64_t line):
        return (core * self.l1i_sets + (line & (self.l1i_sets - 1))) * self.l1i_ways

    cdef inline Py_ssize_t _l2_base(self, int core, int64_t line):
        return (core * self.l2_sets + (line & (self.l2_sets - 1))) * self.l2_ways

    cdef inline int64_t _tick(self):
        self.now += 1
        return self.now

    # -- internal transitions --------------------------------------------

    cdef void _install_llc(self, Py_ssize_t idx, int64_t line, int64_t ts):
        cdef Py_ssize_t base = idx * self.llc_ways
        cdef Py_ssize_t dbase = idx * self.dir_ways
        cdef Py_ssize_t e, s, best, bestdup, d
        cdef int w
        if _find(self.llc_line, base, self.llc_ways, line) >= 0:
            return
        e = _empty(self.llc_line, base, self.llc_ways)
        if e < 0:
            best = -1
            bestdup = -1
            for w in range(self.llc_ways):
                s = base + w
                if best < 0 or self.llc_ts[s] < self.llc_ts[best]:
                    best = s
                d = _find(self.dir_line, dbase, self.dir_ways, self.llc_line[s])
                if d >= 0 and _single(self.dir_mask[d]):
                    if bestdup < 0 or self.llc_ts[s] < self.llc_ts[bestdup]:
                        bestdup = s
            if bestdup < 0 and ts < self.llc_ts[best]:
                return  # the incoming line is itself the LRU victim
            e = bestdup if bestdup >= 0 else best
            d = _find(self.dir_line, dbase, self.dir_ways, self.llc_line[e])
            if d >= 0 and self.dir_mask[d] == 0:
                self.dir_line[d] = -1
        self.llc_line[e] = line
        self.llc_ts[e] = ts

    cdef void _drop_private(self, int core, int64_t line):
        cdef Py_ssize_t s
        s = _find(self.l2_line, self._l2_base(core, line), self.l2_ways, line)
        if s >= 0:
            self.l2_line[s] = -1
        s = _find(self.l1d_line, self._l1d_base(core, line), self.l1d_ways, line)
        if s >= 0:
            self.l1d_line[s] = -1
        s = _find(self.l1i_line, self._l1i_base(core, line), self.l1i_ways, line)
        if s >= 0:
            self.l1i_line[s] = -1

    cdef void _dir_alloc(self, Py_ssize_t idx, int64_t line, int core):
        cdef int64_t now = self._tick()
        cdef Py_ssize_t base = idx * self.dir_ways
        cdef Py_ssize_t s, e, v
        cdef int64_t vline, ts, mask
        cdef int c
        s = _find(self.dir_line, base, self.dir_ways, line)
        if s >= 0:
            self.dir_ts[s] = now
            self.dir_mask[s] |= (<int64_t>1) << core
            return
        e = _empty(self.dir_line, base, self.dir_ways)
        if e < 0:
            v = _lru(self.dir_ts, base, self.dir_ways)
            vline = self.dir_line[v]
            ts = self.dir_ts[v]
            mask = self.dir_mask[v]
            self.dir_line[v] = -1
            if mask:
                for c in range(self.cores):
                    if (mask >> c) & 1:
                        self._drop_private(c, vline)
                self._install_llc(idx, vline, ts)
            e = v
        self.dir_line[e] = line
        self.dir_ts[e] = now
        self.dir_mask[e] = (<int64_t>1) << core

    cdef void _evict_l2(self, int core, Py_ssize_t slot):
        cdef int64_t victim = self.l2_line[slot]
        cdef int64_t ts = self.l2_ts[slot]
        cdef Py_ssize_t s, idx, d
        self.l2_line[slot] = -1
        s = _find(self.l1d_line, self._l1d_base(core, victim), self.l1d_ways, victim)
        if s >= 0:
            self.l1d_line[s] = -1
        s = _find(self.l1i_line, self._l1i_base(core, victim), self.l1i_ways, victim)
        if s >= 0:
            self.l1i_line[s] = -1
        idx = self.llc_index(victim)
        d = _find(self.dir_line, idx * self.dir_ways, self.dir_ways, victim)
        if d >= 0:
            self.dir_mask[d] &= ~((<int64_t>1) << core)
            if self.dir_mask[d] != 0:
                return
        self._install_llc(idx, victim, ts)

    cdef int _fill_private(self, int core, int64_t line, int64_t now):
        cdef Py_ssize_t idx = self.llc_index(line)
        cdef Py_ssize_t s, d, base, e
        cdef int lvl
        s = _find(self.llc_line, idx * self.llc_ways, self.llc_ways, line)
        if s >= 0:
            self.llc_ts[s] = now
            lvl = LLC
        else:
            d = _find(self.dir_line, idx * self.dir_ways, self.dir_ways, line)
            lvl = REMOTE if (d >= 0 and self.dir_mask[d] != 0) else MEM
        self._dir_alloc(idx, line, core)
        base = self._l2_base(core, line)
        e = _empty(self.l2_line, base, self.l2_ways)
        if e < 0:
            e = _lru(self.l2_ts, base, self.l2_ways)
            self._evict_l2(core, e)
        self.l2_line[e] = line
        self.l2_ts[e] = now
        if lvl == REMOTE:
            self._install_llc(idx, line, now)
        return lvl

    cdef int _access(self, int core, int64_t line, bint instr):
        cdef int64_t now = self._tick()
        cdef int64_t* l1_line
        cdef int64_t* l1_ts
        cdef Py_ssize_t b1, s1, s2, e
        cdef int ways, lvl
        if instr:
            l1_line = self.l1i_line
            l1_ts = self.l1i_ts
            b1 = self._l1i_base(core, line)
            ways = self.l1i_ways
        else:
            l1_line = self.l1d_line
            l1_ts = self.l1d_ts
            b1 = self._l1d_base(core, line)
            ways = self.l1d_ways
        s1 = _find(l1_line, b1, ways, line)
        s2 = _find(self.l2_line, self._l2_base(core, line), self.l2_ways, line)
        if s1 >= 0:
            l1_ts[s1] = now
            self.l2_ts[s2] = now
            return L1
        if s2 >= 0:
            self.l2_ts[s2] = now
            lvl = L2
        else:
            lvl = self._fill_private(core, line, now)
        e = _empty(l1_line, b1, ways)
        if e < 0:
            e = _lru(l1_ts, b1, ways)
        l1_line[e] = line
        l1_ts[e] = now
        return lvl

    # -- public operations -------------------------------------------------

    cpdef int load(self, int core, int64_t line):
        return self._access(core, line, False)

    cpdef int fetch(self, int core, int64_t line):
        return self._access(core, line, True)

    cpdef int store(self, int core, int64_t line):
        cdef int lvl = self._access(core, line, False)
        cdef Py_ssize_t idx = self.llc_index(line)
        cdef Py_ssize_t d, s
        cdef int64_t others
        cdef int c
        d = _find(self.dir_line, idx * self.dir_ways, self.dir_ways, line)
        others = self.dir_mask[d] & ~((<int64_t>1) << core)
        for c in range(self.cores):
            if (others >> c) & 1:
                self._drop_private(c, line)
        self.dir_mask[d] = (<int64_t>1) << core
        s = _find(self.llc_line, idx * self.llc_ways, self.llc_ways, line)
        if s >= 0:
            self.llc_line[s] = -1
        self.dirty.add(line)
        return lvl

    cpdef int prefetch_fill(self, int core, int64_t line):
        cdef int64_t now = self._tick()
        cdef Py_ssize_t s2
        if _find(self.l1d_line, self._l1d_base(core, line), self.l1d_ways, line) >= 0:
            return L1
        s2 = _find(self.l2_line, self._l2_base(core, line), self.l2_ways, line)
        if s2 >= 0:
            self.l2_ts[s2] = now
            return L2
        return self._fill_private(core, line, now)

    cpdef int demote(self, int core, int64_t line):
        cdef Py_ssize_t s2 = _find(self.l2_line, self._l2_base(core, line), self.l2_ways, line)
        cdef Py_ssize_t idx, s1, si, d
        cdef int64_t now
        cdef int where
        if s2 < 0:
            idx = self.llc_index(line)
            if _find(self.llc_line, idx * self.llc_ways, self.llc_ways, line) >= 0:
                return LLC
            d = _find(self.dir_line, idx * self.dir_ways, self.dir_ways, line)
            return REMOTE if (d >= 0 and self.dir_mask[d] != 0) else MEM
        now = self._tick()
        s1 = _find(self.l1d_line, self._l1d_base(core, line), self.l1d_ways, line)
        si = _find(self.l1i_line, self._l1i_base(core, line), self.l1i_ways, line)
        where = L1 if (s1 >= 0 or si >= 0) else L2
        self.l2_line[s2] = -1
        if s1 >= 0:
            self.l1d_line[s1] = -1
        if si >= 0:
            self.l1i_line[si] = -1
        idx = self.llc_index(line)
        d = _find(self.dir_line, idx * self.dir_ways, self.dir_ways, line)
        self.dir_mask[d] &= ~((<int64_t>1) << core)
        self._install_llc(idx, line, now)
        return where

    cpdef bint flush(self, int64_t line):
        cdef bint cached = False
        cdef int c
        cdef Py_ssize_t idx, s
        for c in range(self.cores):
            if _find(self.l2_line, self._l2_base(c, line), self.l2_ways, line) >= 0:
                cached = True
                self._drop_private(c, line)
        idx = self.llc_index(line)
        s = _find(self.llc_line, idx * self.llc_ways, self.llc_ways, line)
        if s >= 0:
            cached = True
            self.llc_line[s] = -1
        s = _find(self.dir_line, idx * self.dir_ways, self.dir_ways, line)
        if s >= 0:
            self.dir_line[s] = -1
        self.dirty.discard(line)
        return cached

    cpdef bint stream_store(self, int64_t line):
        return self.flush(line)

    # -- bulk kernels --------------------------------------------------------

    cdef void _place(self, int64_t x, int mode, int main, int helper, int64_t* counts):
        if mode == 0:
            counts[self._access(main, x, False)] += 1
            counts[5 + self.demote(main, x)] += 1
        else:
            counts[self._access(helper, x, False)] += 1
            counts[self._access(main, x, False)] += 1

    def evtest(self, int64_t target, members, flush_lines, int mode, int main, int helper, int probe):
        cdef int64_t[::1] m = np.ascontiguousarray(members, dtype=np.int64)
        cdef int64_t[::1] f = np.ascontiguousarray(flush_lines, dtype=np.int64)
        cdef cnp.ndarray[cnp.int64_t, ndim=1] counts_arr = np.zeros(12, dtype=np.int64)
        cdef int64_t* counts = <int64_t*> cnp.PyArray_DATA(counts_arr)
        cdef Py_ssize_t i
        for i in range(f.shape[0]):
            counts[10 + <int>self.flush(f[i])] += 1
        self._place(target, mode, main, helper, counts)
        for i in range(m.shape[0]):
            self._place(m[i], mode, main, helper, counts)
        return self._access(probe, target, False), counts_arr

    def prime_probe(self, int prime_core, lines, int probe_core, int64_t target,
                    Py_ssize_t iters, bint preload, int stable):
        cdef int64_t[::1] ls = np.ascontiguousarray(lines, dtype=np.int64)
        cdef Py_ssize_t n = ls.shape[0]
        cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(max(iters, 0), dtype=np.int64)
        cdef cnp.ndarray[cnp.int64_t, ndim=1] cur = np.empty(n + 1, dtype=np.int64)
        cdef cnp.ndarray[cnp.int64_t, ndim=1] prev = np.full(n + 1, -1, dtype=np.int64)
        cdef Py_ssize_t it, j, done = 0
        cdef int same = 0
        cdef bint eq
        if preload:
            self._access(probe_core, target, False)
        for it in range(iters):
            for j in range(n):
                cur[j] = self._access(prime_core, ls[j], False)
            cur[n] = self._access(probe_core, target, False)
            out[it] = cur[n]
            done = it + 1
            eq = it > 0
            if eq:
                for j in range(n + 1):
                    if cur[j] != prev[j]:
                        eq = False
                        break
            if eq:
                same += 1
                if same + 1 >= stable:
                    break
            else:
                same = 0
                for j in range(n + 1):
                    prev[j] = cur[j]
        return out[:done].copy()

    # -- oracle views ----------------------------------------------------------

    def locate(self, int64_t line):
        cdef Py_ssize_t idx = self.llc_index(line)
        cdef Py_ssize_t s, d
        cdef int c, w, rank = -1
        l1d = [c for c in range(self.cores)
               if _find(self.l1d_line, self._l1d_base(c, line), self.l1d_ways, line) >= 0]
        l1i = [c for c in range(self.cores)
               if _find(self.l1i_line, self._l1i_base(c, line), self.l1i_ways, line) >= 0]
        l2 = [c for c in range(self.cores)
              if _find(self.l2_line, self._l2_base(c, line), self.l2_ways, line) >= 0]
        s = _find(self.llc_line, idx * self.llc_ways, self.llc_ways, line)
        if s >= 0:
            rank = 0
            for w in range(self.llc_ways):
                if self.llc_line[idx * self.llc_ways + w] != -1 and \
                        self.llc_ts[idx * self.llc_ways + w] > self.llc_ts[s]:
                    rank += 1
        d = _find(self.dir_line, idx * self.dir_ways, self.dir_ways, line)
        return {
            "l1d": l1d,
            "l1i": l1i,
            "l2": l2,
            "llc": s >= 0,
            "llc_ts": self.llc_ts[s] if s >= 0 else -1,
            "llc_rank": rank,
            "dir_mask": self.dir_mask[d] if d >= 0 else -1,
            "dir_ts": self.dir_ts[d] if d >= 0 else -1,
            "dirty": line in self.dirty,
        }

    def dir_count(self, Py_ssize_t idx):
        cdef int w, n = 0
        for w in range(self.dir_ways):
            if self.dir_line[idx * self.dir_ways + w] != -1:
                n += 1
        return n

    def snapshot(self):
        out = []
        a = self._arrays
        for name, sets, ways in (("l1d", self.l1d_sets, self.l1d_ways),
                                 ("l1i", self.l1i_sets, self.l1i_ways),
                                 ("l2", self.l2_sets, self.l2_ways)):
            lines = a[name + "_line"].reshape(self.cores, sets, ways)
            ts = a[name + "_ts"].reshape(self.cores, sets, ways)
            for c, s, w in zip(*np.nonzero(lines != -1)):
                out.append((name, int(c), int(s), int(lines[c, s, w]), int(ts[c, s, w])))
        lines = a["llc_line"].reshape(-1, self.llc_ways)
        ts = a["llc_ts"].reshape(-1, self.llc_ways)
        for i, w in zip(*np.nonzero(lines != -1)):
            out.append(("llc", 0, int(i), int(lines[i, w]), int(ts[i, w])))
        lines = a["dir_line"].reshape(-1, self.dir_ways)
        ts = a["dir_ts"].reshape(-1, self.dir_ways)
        mask = a["dir_mask"].reshape(-1, self.dir_ways)
        for i, w in zip(*np.nonzero(lines != -1)):
            out.append(("dir", int(mask[i, w]), int(i), int(lines[i, w]), int(ts[i, w])))
        out.sort()
        return out, sorted(self.dirty), int(self.now)
