import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import entropy

from demotesim import attacks
from demotesim.attacks import (REGION_END, REGION_START, SLOT_SIZE, SLOTS, ChannelConfig,
                               KaslrLayout, KernelNotFound, balanced_message, bsc_capacity,
                               binary_entropy, capacity_peak, channel_run, channel_sweep,
                               kaslr_evaluate, kaslr_locate, kaslr_randomize, kaslr_scan,
                               round_latency, single_interior_maximum)
from demotesim.config import ConfigError, MachineConfig, build_config
from demotesim.machine import Machine
from demotesim.primitives import ProbeKind

QUIET = {"noise.sigma": 0}


# -- capacity ------------------------------------------------------------------


@pytest.mark.parametrize("p", [1e-6, 1.8e-4, 0.01, 0.11, 0.3, 0.5, 0.9])
def test_binary_entropy_matches_scipy(p):
    assert binary_entropy(p) == pytest.approx(entropy([p, 1 - p], base=2), abs=1e-12)


def test_binary_entropy_edges():
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    with pytest.raises(ValueError):
        binary_entropy(1.5)


def test_flush_demote_capacity_frozen():
    # scipy oracle: 2.857e6 * (1 - H2(1.8e-4))
    oracle = 2.857e6 * (1 - entropy([1.8e-4, 1 - 1.8e-4], base=2))
    got = bsc_capacity(2.857e6, 1.8e-4)
    assert got == pytest.approx(oracle, rel=1e-12)
    assert got == pytest.approx(2_849_861, abs=1)
    assert abs(got - 2.849e6) <= 0.005e6


@pytest.mark.parametrize("raw,ber,cap", [(1.25e6, 0.00015, 1.248e6),
                                         (2.857e6, 0.00022, 2.848e6),
                                         (2.857e6, 0.00018, 2.849e6)])
def test_reference_triples(raw, ber, cap):
    assert abs(bsc_capacity(raw, ber) - cap) <= 0.005e6


def test_capacity_limits():
    assert bsc_capacity(2e6, 0.0) == 2e6
    assert bsc_capacity(2e6, 0.5) == 0.0
    # beyond 0.5 the receiver would invert; clamped instead
    assert bsc_capacity(2e6, 0.8) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(1e3, 1e9), st.floats(0, 0.5), st.floats(0, 0.5))
def test_capacity_bounded_and_monotone(raw, a, b):
    lo, hi = sorted((a, b))
    c_lo, c_hi = bsc_capacity(raw, lo), bsc_capacity(raw, hi)
    assert 0.0 <= c_hi <= c_lo <= raw


# -- channel ---------------------------------------------------------------------


def test_balanced_message():
    m = balanced_message(1001, seed=3)
    assert m.sum() == 500 and len(m) == 1001
    assert np.array_equal(m, balanced_message(1001, seed=3))
    assert not np.array_equal(m, balanced_message(1001, seed=4))


def test_round_latency_from_profile():
    p = MachineConfig().profile
    flush = max(p.cache["CLFLUSH"].values())
    assert round_latency(p, "FlushDemote") == max(p.probe_tables["FlushDemote"]) + flush
    assert round_latency(p, "FlushReload") == 308 + flush
    assert round_latency(p, "FlushFlush") == 213


def test_default_window_low_ber():
    r = channel_run(ChannelConfig(700, bits=20_000), seed=1)
    assert r.bits == 20_000
    assert r.ber <= 0.001
    assert r.raw_rate == pytest.approx(2e9 / 700)
    assert r.capacity == pytest.approx(bsc_capacity(r.raw_rate, r.ber))


def test_large_window_is_error_free():
    for kind in ("FlushDemote", "FlushReload", "FlushFlush", "StreamReload"):
        r = channel_run(ChannelConfig(3000, primitive=kind, bits=3000), seed=2)
        assert r.errors == 0, kind
        assert r.capacity == r.raw_rate


def test_explicit_message_is_received():
    msg = np.array([1, 0, 1, 1, 0, 0, 0, 1] * 50, dtype=np.uint8)
    r = channel_run(ChannelConfig(1500, message=msg), seed=5)
    assert r.bits == len(msg)
    assert np.array_equal(r.received, msg)


def test_window_too_small():
    with pytest.raises(ConfigError):
        channel_run(ChannelConfig(400, bits=100))


def test_demote_time_is_not_a_channel():
    with pytest.raises(ConfigError):
        ChannelConfig(700, primitive=ProbeKind.DemoteTime)


def test_channel_is_deterministic():
    a = channel_run(ChannelConfig(600, bits=5000), seed=9)
    b = channel_run(ChannelConfig(600, bits=5000), seed=9)
    assert a.as_dict() == b.as_dict()
    assert np.array_equal(a.received, b.received)


def test_sweep_shape_and_ordering():
    windows = range(300, 1300, 100)
    fd = channel_sweep(windows, 20_000, "FlushDemote", seed=0)
    fr = channel_sweep(windows, 20_000, "FlushReload", seed=0)
    # windows that cannot hold a round are skipped
    assert min(r.window_cycles for r in fd) > round_latency(MachineConfig().profile,
                                                            "FlushDemote")
    assert single_interior_maximum([r.capacity for r in fd])
    assert capacity_peak(fd).capacity > capacity_peak(fr).capacity
    big = fd[-1]
    assert big.ber == 0.0


def test_single_interior_maximum():
    assert single_interior_maximum([1, 3, 2])
    assert single_interior_maximum([1, 2, 2, 5, 4, 4, 1])
    assert not single_interior_maximum([3, 2, 1])
    assert not single_interior_maximum([1, 2, 3])
    assert not single_interior_maximum([1, 3, 1, 3, 1])
    assert not single_interior_maximum([1, 2])


# -- KASLR -----------------------------------------------------------------------


def test_region_geometry():
    assert SLOTS == 512
    assert SLOT_SIZE == 0x200000
    assert REGION_START + SLOTS * SLOT_SIZE == REGION_END


def test_layout_example():
    lay = KaslrLayout(409, 22)
    assert lay.occupied == range(409, 431)
    assert lay.base == 0xffffffffb3200000
    assert lay.base == REGION_START + 409 * 0x200000


def test_layout_must_fit():
    with pytest.raises(ValueError):
        KaslrLayout(491, 22)
    KaslrLayout(490, 22)
    with pytest.raises(ValueError):
        KaslrLayout(0, 0)


def test_randomize_determinism_and_bounds():
    a = kaslr_randomize(Machine(seed=0), seed=11)
    b = kaslr_randomize(Machine(seed=1), seed=11)
    assert a.start_slot == b.start_slot
    starts = {kaslr_randomize(Machine(seed=s)).start_slot for s in range(15)}
    assert len(starts) > 10
    assert all(0 <= s <= SLOTS - 22 for s in starts)


def test_randomize_full_region():
    assert kaslr_randomize(Machine(seed=3), kernel_slots=512).start_slot == 0
    with pytest.raises(ValueError):
        kaslr_randomize(Machine(seed=3), kernel_slots=513)


def test_randomize_maps_kernel_pages():
    m = Machine(seed=4)
    lay = kaslr_randomize(m)
    for s in (lay.start_slot, lay.start_slot + lay.kernel_slots - 1):
        e, lvl = m.space.leaf(lay.slot_va(s) & attacks.vm.VA_MASK)
        assert lvl == 4
        assert e.present and not e.user and e.accessed


def test_scan_means_probes_and_time():
    m = Machine(build_config(QUIET), seed=5)
    lay = kaslr_randomize(m)
    scan = kaslr_scan(m)
    occ = np.zeros(SLOTS, bool)
    occ[lay.start_slot:lay.start_slot + lay.kernel_slots] = True
    assert np.all(scan.means[occ] == 114)
    # empty slots: the invalid-kernel row (149) within 2 cycles
    assert np.all(np.abs(scan.means[~occ] - 149) <= 2)
    assert scan.probes == 512 * 100
    assert scan.faults == 0
    # independent oracle: sum of per-slot means times repeats over the clock
    oracle_ms = (22 * 114 + 490 * 148) * 100 / 2.0e6
    assert scan.millis(2.0) == pytest.approx(oracle_ms)
    assert 2.0 <= scan.millis(2.0) <= 4.0


def test_scan_with_noise_separates():
    m = Machine(seed=6)
    lay = kaslr_randomize(m)
    scan = kaslr_scan(m)
    assert scan.faults == 0
    assert abs(scan.means[lay.start_slot] - 114) <= 2
    assert kaslr_locate(scan.means) == lay.base


def test_locate_examples():
    lat = np.full(SLOTS, 149.0)
    lat[409:431] = 114
    assert kaslr_locate(lat) == 0xffffffffb3200000
    lat = np.full(SLOTS, 149.0)
    lat[:22] = 114
    assert kaslr_locate(lat) == REGION_START
    with pytest.raises(KernelNotFound):
        kaslr_locate(np.full(SLOTS, 149.0))


def test_locate_prefers_longest_run():
    lat = np.full(SLOTS, 149.0)
    lat[10:12] = 114
    lat[100:122] = 114
    lat[300] = 114
    assert kaslr_locate(lat) == REGION_START + 100 * SLOT_SIZE


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([114.0, 149.0]), min_size=SLOTS, max_size=SLOTS))
def test_locate_is_slot_aligned(lat):
    if min(lat) >= 131:
        with pytest.raises(KernelNotFound):
            kaslr_locate(lat)
        return
    base = kaslr_locate(lat)
    assert REGION_START <= base < REGION_END
    assert (base - REGION_START) % SLOT_SIZE == 0
    assert lat[(base - REGION_START) // SLOT_SIZE] < 131


def test_evaluate_quiet_is_exact():
    ev = kaslr_evaluate(6, 3, seed=2, machine_cfg=build_config(QUIET))
    assert ev.accuracy == 1.0
    assert ev.mean_ms == pytest.approx((22 * 114 + 490 * 148) * 100 / 2.0e6)


def test_evaluate_default_noise():
    ev = kaslr_evaluate(20, 4, seed=1)
    assert ev.accuracy >= 0.95
    assert 2.0 <= ev.mean_ms <= 4.0


def test_evaluate_rejects_uneven_reboots():
    with pytest.raises(ValueError):
        kaslr_evaluate(10, 3)


def test_privileged_only_defeats_scan():
    cfg = build_config({"countermeasures.privileged_only": True})
    ev = kaslr_evaluate(4, 2, seed=0, machine_cfg=cfg)
    assert ev.accuracy == 0.0
    assert all(b is None for b in ev.bases)


def test_noise_injection_at_gap_is_averaged_out():
    # jitter of amplitude A is uniform, sd A/sqrt(3); 100 repeats shrink it tenfold,
    # so an amplitude equal to the 34-cycle gap leaves the slots separable
    gap = 148 - 114
    sd_mean = gap / math.sqrt(3) / 10
    assert (131 - 114) / sd_mean > 8
    cfg = build_config({"countermeasures.noise_injection": gap})
    assert kaslr_evaluate(10, 2, seed=1, machine_cfg=cfg).accuracy >= 0.9


def test_noise_injection_far_above_gap_collapses():
    cfg = build_config({"countermeasures.noise_injection": 3000})
    ev = kaslr_evaluate(10, 2, seed=1, machine_cfg=cfg)
    # chance over start slots is 1/491; ten trials should essentially never hit
    assert ev.accuracy <= 0.1
