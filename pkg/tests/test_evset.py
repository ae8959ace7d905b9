"""Candidate pools, LLC placement, eviction tests, reduction and reverse engineering."""

import numpy as np
import pytest

from demotesim import vm
from demotesim.config import build_config
from demotesim import evset
from demotesim.evset import (NotAnEvictionSet, Placement, SingleCoreError, congruent,
                             congruent_addresses, construct, detect_breakpoints,
                             generate_candidates, is_eviction_set, place_in_llc, reduce,
                             reverse_directory, reverse_llc, target_coordinates)
from demotesim.machine import Machine

TARGET = 0x100000040


def fresh(seed=1, **over):
    m = Machine(build_config(over), seed=seed)
    m.map(TARGET & ~0xFFF, vm.PAGE_SIZE)
    return m


def test_candidates_share_page_offset():
    m = fresh()
    c = generate_candidates(m, TARGET, 256)
    assert len(c) == 256
    assert all(x & 0xFFF == TARGET & 0xFFF for x in c)
    assert generate_candidates(m, TARGET, 0) == []


def test_congruent_fraction():
    # set bits 11:6 are fixed by the offset, bits 16:12 are random (32 ways to
    # land) and the slice is one of 12: expect one in 384
    hits = total = 0
    for seed in range(4):
        m = fresh(seed)
        c = generate_candidates(m, TARGET, 12288)
        hits += sum(congruent(m, TARGET, x) for x in c)
        total += len(c)
    expect = total / (32 * 12)
    assert abs(hits - expect) < 4 * np.sqrt(expect)


def test_place_in_llc_cldemote(quiet_machine):
    m = quiet_machine
    m.map(TARGET & ~0xFFF, vm.PAGE_SIZE)
    cyc = place_in_llc(m, TARGET, "cldemote")
    assert cyc == 308 + 210  # load from memory, then demote the fresh L1 line
    assert m.locate(TARGET).in_llc


def test_place_in_llc_helper(quiet_machine):
    m = quiet_machine
    m.map(TARGET & ~0xFFF, vm.PAGE_SIZE)
    place_in_llc(m, TARGET, "helper")
    assert m.locate(TARGET).in_llc


def test_helper_needs_two_cores():
    m = fresh(**{"hierarchy.cores": 1})
    with pytest.raises(SingleCoreError):
        place_in_llc(m, TARGET, "helper")
    with pytest.raises(SingleCoreError):
        evset.Tester(m, TARGET, "LLC", "helper")


def test_unknown_placement():
    with pytest.raises(ValueError):
        Placement.parse("conflict")


def test_eviction_set_membership():
    m = fresh()
    lines = congruent_addresses(m, TARGET, 31)
    assert is_eviction_set(m, TARGET, lines)
    assert not is_eviction_set(m, TARGET, lines[:14])
    assert not is_eviction_set(m, TARGET, [])


def test_reduce_to_llc_ways():
    # 12 slices x 32 set choices: a 4096 pool holds ~11 congruent lines, too
    # few for 15 ways, so use the default 12288 pool (~32 expected)
    m = fresh(3)
    cands = generate_candidates(m, TARGET)
    assert len(cands) == 12288
    es = reduce(m, TARGET, cands, 15)
    assert es.stats.success
    assert len(es.members) == 15
    assert all(congruent(m, TARGET, x) for x in es.members)
    assert es.stats.simulated_cycles >= es.stats.memory_ops > 0


def test_reduce_fixed_point():
    m = fresh()
    lines = congruent_addresses(m, TARGET, 15)
    es = reduce(m, TARGET, lines, 15)
    assert es.members == lines


def test_reduce_rejects_non_evicting_pool():
    m = fresh()
    with pytest.raises(NotAnEvictionSet):
        reduce(m, TARGET, congruent_addresses(m, TARGET, 10), 15)


def test_reduce_directory_level():
    m = fresh()
    lines = congruent_addresses(m, TARGET, 40)
    es = reduce(m, TARGET, lines, 25, level="directory")
    assert len(es.members) == 25


def test_placements_agree_and_cldemote_is_cheaper():
    a, sa = construct(fresh(6), TARGET, "cldemote")
    b, sb = construct(fresh(6), TARGET, "helper")
    assert sa.success and sb.success
    assert a.members == b.members
    assert sa.simulated_cycles < sb.simulated_cycles
    assert sa.tests == sb.tests


def test_detect_breakpoints():
    assert detect_breakpoints([1, 2, 3, 4], [60, 60, 75, 75]) == [3]
    assert detect_breakpoints([1, 2, 3], [60, 61, 62]) == []


def test_reverse_llc_default():
    c = reverse_llc(fresh(), TARGET, samples=5000)
    assert c.breakpoints == [12, 16, 31]
    assert c.levels == ["L2", "LLC", "MEM"]
    assert c.inferred == {"l1d_ways": 12, "l2_ways": 16, "llc_ways": 15}


def test_reverse_directory_default():
    c = reverse_directory(fresh(), TARGET, samples=5000)
    assert c.breakpoints == [25, 31]
    assert c.inferred == {"dir_ways": 25}


def test_reverse_with_modified_ground_truth():
    # narrower L2: L1d can only keep what L2 keeps, so the L1->L2 step disappears
    c = reverse_llc(fresh(**{"hierarchy.l2.ways": 8}), TARGET, samples=2000)
    assert c.breakpoints == [8, 8 + 15]
    d = reverse_directory(fresh(**{"hierarchy.dir.ways": 20}), TARGET, samples=2000)
    assert d.breakpoints[0] == 20 and d.inferred == {"dir_ways": 20}
    e = reverse_llc(fresh(**{"hierarchy.llc.ways": 20}), TARGET, samples=2000)
    assert e.inferred["llc_ways"] == 20


def test_reverse_directory_short_sweep_is_inconclusive():
    c = reverse_directory(fresh(), TARGET, max_n=20, samples=1000)
    assert c.breakpoints == [] and c.inferred == {}


def test_reverse_directory_needs_two_cores():
    with pytest.raises(SingleCoreError):
        reverse_directory(fresh(**{"hierarchy.cores": 1}), TARGET, samples=10)


def test_target_coordinates():
    m = fresh()
    c = target_coordinates(m, TARGET)
    assert c.offset == 0 and c.set == (m.line(TARGET) & 2047)
