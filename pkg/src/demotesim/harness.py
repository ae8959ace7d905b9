"""Experiment orchestration and report emission.

``run(name, config, seed)`` builds the machines an experiment needs, runs it
and returns an ``ExperimentReport``: the config echo, parameters, summary
metrics, named pass/fail checks and per-trial tables. The report body is a
pure function of (config, seed, parameters); wall-clock data lives in a
separate ``meta`` block that is left out of comparisons.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, evset, primitives, taxonomy, vm
from .cache import BACKEND
from .config import MachineConfig, load_config
from .machine import Machine, cldemote, prefetch
from .primitives import ProbeKind

SCHEMA_VERSION = 1
OUT_ENV = "DEMOTESIM_OUT"
DEFAULT_OUT = "demotesim-out"

# (primitive, raw rate in bit/s, BER, capacity in bit/s) reference triples
CAPACITY_REFERENCE = (
    ("FlushReload", 1.25e6, 0.00015, 1.248e6),
    ("FlushFlush", 2.857e6, 0.00022, 2.848e6),
    ("FlushDemote", 2.857e6, 0.00018, 2.849e6),
)
DEMOTE_STATE_MEANS = {"L1": 210, "L2": 200, "LLC": 132, "absent": 132}
TARGET_VA = 0x100000040


class UnknownExperiment(KeyError):
    pass


class ExperimentError(RuntimeError):
    """A module error, re-raised with the experiment it came from."""


@dataclass
class Table:
    columns: list
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()


@dataclass
class ExperimentReport:
    experiment: str
    seed: int
    config: dict
    params: dict
    metrics: dict
    checks: dict
    tables: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def body(self) -> dict:
        return _plain({
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "seed": self.seed,
            "config": self.config,
            "params": self.params,
            "metrics": self.metrics,
            "checks": self.checks,
            "passed": self.passed,
            "tables": {k: {"columns": t.columns, "rows": len(t.rows)}
                       for k, t in self.tables.items()},
        })

    def body_json(self) -> str:
        return json.dumps(self.body(), sort_keys=True, indent=2)

    def metrics_json(self) -> str:
        return json.dumps(_plain({"metrics": self.metrics, "checks": self.checks}),
                          sort_keys=True)

    def to_json(self) -> str:
        d = self.body()
        d["meta"] = _plain(self.meta)
        return json.dumps(d, sort_keys=True, indent=2)

    def metrics_csv(self) -> str:
        rows = [(k, v) for k, v in sorted(_flat(_plain(self.metrics)).items())]
        rows += [(f"check.{k}", v) for k, v in sorted(self.checks.items())]
        return Table(["metric", "value"], rows).to_csv()

    def write(self, out_dir) -> list:
        """Write ``<experiment>.json`` plus one CSV per table; returns the paths."""
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        stem = self.experiment
        paths = [d / f"{stem}.json", d / f"{stem}.metrics.csv"]
        paths[0].write_text(self.to_json() + "\n")
        paths[1].write_text(self.metrics_csv())
        for name, t in sorted(self.tables.items()):
            p = d / f"{stem}.{name}.csv"
            p.write_text(t.to_csv())
            paths.append(p)
        return paths


def _plain(x):
    """Convert numpy scalars/arrays, tuples and enums to JSON-native values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if hasattr(x, "value") and not isinstance(x, (int, float, str)):
        return x.value
    return x


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = json.dumps(v) if isinstance(v, list) else v
    return out


def _near(x: float, ref: float, tol: float = 2.0) -> bool:
    return abs(x - ref) <= tol


# -- experiments -------------------------------------------------------------


def _bench(cfg, seed, kinds=("FlushDemote", "FlushReload", "FlushFlush", "StreamReload"),
           samples=10_000):
    metrics, checks, rows = {}, {}, []
    for k in kinds:
        kind = ProbeKind(k)
        m = Machine(cfg, seed=seed)
        va = primitives.setup_shared(m, writable=kind is ProbeKind.StreamReload)
        th = m.thread("bench")
        thr = primitives.table_threshold(m, kind)
        primitives.reset(m, th, kind, va)
        lat = {"hit": np.empty(samples, dtype=np.int64), "miss": np.empty(samples, dtype=np.int64)}
        for i in range(samples):
            m.execute(th, primitives.load(va))
            lat["hit"][i] = primitives.timed(m, th, kind, va)
        for i in range(samples):
            lat["miss"][i] = primitives.timed(m, th, kind, va)
        good = sum(int(np.count_nonzero([primitives.classify(kind, c, thr) == (s == "hit")
                                         for c in lat[s]])) for s in ("hit", "miss"))
        ref_hit, ref_miss = m.profile.probe_tables[kind.value]
        hit, miss = float(lat["hit"].mean()), float(lat["miss"].mean())
        metrics[k] = {"hit_mean": hit, "miss_mean": miss, "threshold": thr.cycles,
                      "accuracy": good / (2 * samples)}
        checks[f"{k}.hit_within_2"] = _near(hit, ref_hit)
        checks[f"{k}.miss_within_2"] = _near(miss, ref_miss)
        for s in ("hit", "miss"):
            rows += [(k, i, s, int(c)) for i, c in enumerate(lat[s])]
    return {"kinds": list(kinds), "samples": samples}, metrics, checks, \
        {"samples": Table(["kind", "round", "state", "cycles"], rows)}


def _algorithm1(cfg, seed, kinds=("FlushDemote", "FlushReload", "FlushFlush", "StreamReload"),
                iterations=1000, victim_core=None, min_accuracy=0.99):
    metrics, checks = {}, {}
    for k in kinds:
        m = Machine(cfg, seed=seed)
        acc = primitives.run_algorithm1(m, iterations, ProbeKind(k), victim_core=victim_core)
        metrics[k] = {"accuracy": acc}
        checks[f"{k}.accuracy"] = acc >= min_accuracy
    rows = [(k, v["accuracy"]) for k, v in metrics.items()]
    return {"kinds": list(kinds), "iterations": iterations, "victim_core": victim_core}, \
        metrics, checks, {"accuracy": Table(["kind", "accuracy"], rows)}


INVALID_USER = 0x000050000000000
VALID_KERNEL = 0xFFFFFFFF81000000 & vm.VA_MASK
INVALID_KERNEL = 0xFFFFFFFFA0000000 & vm.VA_MASK


def _demote_time(cfg, seed, state_samples=100_000, table_samples=10_000,
                 counter_ops=1_000_000, adversarial_ops=1_000_000):
    metrics, checks, tables = {}, {}, {}
    m = Machine(cfg, seed=seed)
    th = m.thread("demote")
    va = primitives.setup_shared(m)
    # cldemote latency by residency of the line
    states = {}
    for s in primitives.DEMOTE_STATES:
        lat = primitives.demote_state_latencies(m, th, va, s, state_samples)
        states[s] = float(lat.mean())
        checks[f"state.{s}_within_2"] = _near(states[s], DEMOTE_STATE_MEANS[s])
    metrics["state_means"] = states
    tables["states"] = Table(["state", "mean_cycles", "reference"],
                             [(s, states[s], DEMOTE_STATE_MEANS[s]) for s in states])
    # page bits x TLB outcome
    rows = []
    tm = Machine(cfg, seed=seed)
    tth = tm.thread("tlb")
    for r in primitives.tlb_table_scan(tm, tth, table_samples):
        p, u, d, nx, a, mt = r["bits"]
        name = f"P{p}U{u}D{d}NX{nx}A{a}-{mt.name}"
        ok = all(_near(x, ref) for x, ref in zip(r["measured_prefetch"] + r["measured_cldemote"],
                                               r["prefetch"] + r["cldemote"]))
        if not a:
            ok = ok and abs(r["measured_cldemote"][0] - r["measured_cldemote"][1]) <= 2
        checks[f"table.{name}"] = ok
        rows.append((name, *r["prefetch"], *r["measured_prefetch"], *r["cldemote"],
                     *r["measured_cldemote"]))
    tables["tlb"] = Table(["row", "prefetch_hit_ref", "prefetch_miss_ref", "prefetch_hit",
                           "prefetch_miss", "cldemote_hit_ref", "cldemote_miss_ref",
                           "cldemote_hit", "cldemote_miss"], rows)
    metrics["tlb_rows"] = len(rows)
    # walk counters for invalid addresses
    cm = Machine(cfg, seed=seed)
    c1, c2 = cm.thread("ctr-demote"), cm.thread("ctr-prefetch")
    _, f1 = cm.repeat(c1, cldemote(INVALID_USER), counter_ops, context="tlb")
    _, f2 = cm.repeat(c2, prefetch(INVALID_USER), counter_ops, context="tlb")
    ctr = {"cldemote": c1.counters.as_dict(), "prefetch": c2.counters.as_dict()}
    metrics["counters"] = ctr
    checks["counters.cldemote_store_walks"] = \
        ctr["cldemote"]["dtlb_store_walk_completed"] == 2 * counter_ops
    checks["counters.prefetch_load_walks"] = ctr["prefetch"]["dtlb_load_walk_completed"] <= 1
    # adversarial stream: no instruction may fault
    am = Machine(cfg, seed=seed)
    vm.map_region(am.space, VALID_KERNEL, vm.PAGE_SIZE,
                  vm.PageTableEntry(present=True, user=False))
    ath = am.thread("adversary")
    targets = (INVALID_USER, VALID_KERNEL, INVALID_KERNEL)
    stream = [ins for t in targets for ins in (cldemote(t), prefetch(t))]
    per, extra = divmod(adversarial_ops, len(stream))
    faults = 0
    done = 0
    for i, ins in enumerate(stream):
        k = per + (i < extra)
        if k:
            _, f = am.repeat(ath, ins, k, context="tlb")
            faults += f
            done += k
    metrics["adversarial"] = {"ops": done, "faults": faults}
    checks["adversarial.no_faults"] = faults == 0 and f1 == 0 and f2 == 0
    return {"state_samples": state_samples, "table_samples": table_samples,
            "counter_ops": counter_ops, "adversarial_ops": adversarial_ops}, \
        metrics, checks, tables


def _page_levels(cfg, seed, samples=100_000):
    m = Machine(cfg, seed=seed)
    th = m.thread("levels")
    res = primitives.page_level_scan(m, th, n=samples)
    d = [res[k][0] for k in vm.LEVELS]
    p = [res[k][1] for k in vm.LEVELS]
    metrics = {"cldemote": dict(zip(vm.LEVELS, d)), "prefetch_t2": dict(zip(vm.LEVELS, p)),
               "prefetch_spread": max(p) - min(p)}
    checks = {
        "cldemote_strictly_monotone": all(a > b for a, b in zip(d, d[1:])),
        "pt_within_2_of_113": _near(d[-1], 113),
        "prefetch_spread_le_3": max(p) - min(p) <= 3,
    }
    rows = [(k, res[k][0], res[k][1]) for k in vm.LEVELS]
    return {"samples": samples}, metrics, checks, \
        {"levels": Table(["level", "cldemote", "prefetch_t2"], rows)}


def _covert(cfg, seed, window=700, bits=1_000_000, primitive="FlushDemote", sweep=None,
            sweep_bits=100_000, max_ber=0.001):
    rep = attacks.channel_run(attacks.ChannelConfig(window, primitive=primitive, bits=bits),
                              seed, cfg)
    metrics = {"run": rep.as_dict()}
    checks = {"ber_le_limit": rep.ber <= max_ber}
    ref = []
    for name, raw, ber, cap in CAPACITY_REFERENCE:
        got = attacks.bsc_capacity(raw, ber)
        ref.append((name, raw, ber, cap, got))
        checks[f"capacity_formula.{name}"] = abs(got - cap) <= 0.005e6
    metrics["capacity_formula"] = {r[0]: r[4] for r in ref}
    tables = {"capacity_reference": Table(["primitive", "raw_rate_bps", "ber",
                                           "reference_capacity_bps", "formula_capacity_bps"],
                                          ref)}
    if sweep:
        reps = attacks.channel_sweep(sweep, sweep_bits, primitive, seed, cfg)
        caps = [r.capacity for r in reps]
        peak = attacks.capacity_peak(reps)
        metrics["sweep_peak"] = peak.as_dict()
        checks["sweep_single_interior_maximum"] = attacks.single_interior_maximum(caps)
        tables["sweep"] = Table(["window_cycles", "raw_rate_bps", "errors", "ber",
                                 "capacity_bps"],
                                [(r.window_cycles, r.raw_rate, r.errors, r.ber, r.capacity)
                                 for r in reps])
    return {"window": window, "bits": bits, "primitive": ProbeKind(primitive).value,
            "sweep": list(sweep) if sweep else None, "sweep_bits": sweep_bits}, \
        metrics, checks, tables


def _kaslr(cfg, seed, trials=1000, reboots=10, repeats=100):
    ev = attacks.kaslr_evaluate(trials, reboots, seed, cfg, repeats)
    metrics = {"trials": ev.trials, "correct": ev.correct, "accuracy": ev.accuracy,
               "mean_cycles": ev.mean_cycles, "mean_ms": ev.mean_ms}
    if cfg.countermeasures.privileged_only:
        checks = {"countermeasure_accuracy_le_1pct": ev.accuracy <= 0.01}
    else:
        checks = {"accuracy_ge_99pct": ev.accuracy >= 0.99,
                  "scan_ms_in_2_4": 2.0 <= ev.mean_ms <= 4.0}
    rows = [(i, "" if b is None else f"{b:#x}") for i, b in enumerate(ev.bases)]
    return {"trials": trials, "reboots": reboots, "repeats": repeats}, metrics, checks, \
        {"trials": Table(["trial", "found_base"], rows)}


def _evset_one(cfg, seed, placement):
    m = Machine(cfg, seed=seed)
    m.map(TARGET_VA & ~0xFFF, vm.PAGE_SIZE)
    es, st = evset.construct(m, TARGET_VA, placement)
    return st


def run_seeds(seed: int, runs: int) -> list:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(runs)]


def _evset(cfg, seed, runs=100, placements=("cldemote", "helper")):
    seeds = run_seeds(seed, runs)
    metrics, checks, rows = {}, {}, []
    for pl in placements:
        name = evset.Placement.parse(pl)
        stats = [_evset_one(cfg, s, name) for s in seeds]
        ok = sum(st.success for st in stats)
        metrics[name] = {"success": ok, "runs": runs, "success_rate": ok / runs,
                         "mean_cycles": float(np.mean([st.simulated_cycles for st in stats])),
                         "mean_ops": float(np.mean([st.memory_ops for st in stats])),
                         "mean_tests": float(np.mean([st.tests for st in stats]))}
        checks[f"{name}.success_ge_95pct"] = ok / runs >= 0.95
        rows += [(name, i, s, int(st.success), st.memory_ops, st.simulated_cycles, st.tests)
                 for i, (s, st) in enumerate(zip(seeds, stats))]
    c, h = evset.Placement.CLDEMOTE, evset.Placement.HELPER
    if c in metrics and h in metrics:
        ratio = metrics[c]["mean_cycles"] / metrics[h]["mean_cycles"]
        metrics["cycle_ratio"] = ratio
        checks["cycle_ratio_in_0.5_0.75"] = 0.5 <= ratio <= 0.75
    return {"runs": runs, "placements": [evset.Placement.parse(p) for p in placements]}, \
        metrics, checks, {"runs": Table(["placement", "run", "seed", "success", "memory_ops",
                                         "simulated_cycles", "tests"], rows)}


def _expected_geometry(cfg: MachineConfig) -> dict:
    h = cfg.hierarchy
    return {"l1d_ways": h.l1d[1], "l2_ways": h.l2[1], "llc_ways": h.llc[1],
            "dir_ways": h.dir_ways}


def _reverse(cfg, seed, which, max_n=40, samples=100_000, runs=1, run_samples=10_000):
    fn = evset.reverse_llc if which == "llc" else evset.reverse_directory
    h = cfg.hierarchy
    if which == "llc":
        # an L2 no wider than L1d caps what L1d can keep
        want_bps = [h.l1d[1]] if h.l1d[1] < h.l2[1] else []
        want_bps += [h.l2[1], h.l2[1] + h.llc[1]]
    else:
        want_bps = [h.dir_ways, h.l2[1] + h.llc[1]]
    m = Machine(cfg, seed=seed)
    m.map(TARGET_VA & ~0xFFF, vm.PAGE_SIZE)
    curve = fn(m, TARGET_VA, max_n, samples)
    exp = _expected_geometry(cfg)
    metrics = {"breakpoints": curve.breakpoints, "levels": curve.levels,
               "inferred": curve.inferred}
    checks = {"breakpoints": curve.breakpoints == want_bps,
              "inferred_geometry": all(exp[k] == v for k, v in curve.inferred.items())
              and bool(curve.inferred)}
    rows = []
    if runs > 1:
        good = 0
        for i, s in enumerate(run_seeds(seed, runs)):
            rm = Machine(cfg, seed=s)
            rm.map(TARGET_VA & ~0xFFF, vm.PAGE_SIZE)
            c = fn(rm, TARGET_VA, max_n, run_samples)
            ok = bool(c.inferred) and all(exp[k] == v for k, v in c.inferred.items())
            good += ok
            rows.append((i, s, " ".join(map(str, c.breakpoints)), int(ok)))
        metrics["geometry_runs"] = {"runs": runs, "correct": good}
        checks["geometry_ge_95pct"] = good / runs >= 0.95
    tables = {"curve": Table(["n", "mean_cycles"], curve.rows())}
    if rows:
        tables["runs"] = Table(["run", "seed", "breakpoints", "geometry_ok"], rows)
    return {"max_n": max_n, "samples": samples, "runs": runs, "run_samples": run_samples}, \
        metrics, checks, tables


def _taxonomy(cfg, seed, profile=None):
    rows = taxonomy.verify_table()
    metrics = {"rows": len(rows), "rows_ok": sum(r.ok for r in rows),
               "monotonicity_violations": len(taxonomy.monotonicity_violations()),
               "implication_violations": len(taxonomy.implication_violations())}
    checks = {f"row.{r.name}": r.ok for r in rows}
    checks["monotone_over_32_profiles"] = metrics["monotonicity_violations"] == 0
    checks["faultless_kaslr_implies_cache_attack"] = metrics["implication_violations"] == 0
    table = Table(["instruction", *taxonomy.ATTACKS, "ok"],
                  [(r.name, *(r.got[a].value for a in taxonomy.ATTACKS), int(r.ok))
                   for r in rows])
    params = {"profile": profile}
    if profile:
        prof = taxonomy.ExtensionProfile.parse(profile, "custom")
        metrics["profile"] = {"bits": dict(zip(taxonomy.BITS, prof.bits())),
                              "feasible": {a: f.value for a, f in
                                           taxonomy.feasible_attacks(prof).items()}}
    return params, metrics, checks, {"table": table}


EXPERIMENTS = {
    "bench": _bench,
    "algorithm1": _algorithm1,
    "demote-time": _demote_time,
    "page-levels": _page_levels,
    "covert": _covert,
    "kaslr": _kaslr,
    "evset": _evset,
    "reverse-llc": lambda cfg, seed, **kw: _reverse(cfg, seed, "llc", **kw),
    "reverse-dir": lambda cfg, seed, **kw: _reverse(cfg, seed, "dir", **kw),
    "taxonomy": _taxonomy,
}


def resolve_out_dir(out_dir=None) -> Path:
    return Path(out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run(experiment: str, config: MachineConfig | str | os.PathLike | None = None,
        seed: int | None = None, out_dir=None, **params) -> ExperimentReport:
    """Run one experiment; writes the report files when ``out_dir`` is given
    (or the output-directory environment variable is set)."""
    if experiment not in EXPERIMENTS:
        raise UnknownExperiment(f"unknown experiment {experiment!r}; "
                                f"choose from {sorted(EXPERIMENTS)}")
    if config is None:
        cfg = MachineConfig()
    elif isinstance(config, MachineConfig):
        cfg = config
    else:
        cfg = load_config(config)
    seed = cfg.seed if seed is None else int(seed)
    t0 = time.perf_counter()
    try:
        p, metrics, checks, tables = EXPERIMENTS[experiment](cfg, seed, **params)
    except (UnknownExperiment, TypeError):
        raise
    except Exception as exc:
        raise ExperimentError(f"{experiment}: {type(exc).__name__}: {exc}") from exc
    rep = ExperimentReport(experiment, seed, cfg.to_dict(), p, metrics,
                           {k: bool(v) for k, v in checks.items()}, tables,
                           meta={"elapsed_s": round(time.perf_counter() - t0, 3),
                                 "backend": BACKEND,
                                 "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S")})
    if out_dir is not None or os.environ.get(OUT_ENV):
        rep.meta["files"] = [str(x) for x in rep.write(resolve_out_dir(out_dir))]
    return rep


__all__ = ["SCHEMA_VERSION", "OUT_ENV", "EXPERIMENTS", "ExperimentReport", "Table",
           "UnknownExperiment", "ExperimentError", "run", "run_seeds", "resolve_out_dir",
           "CAPACITY_REFERENCE", "DEMOTE_STATE_MEANS"]
