"""Machine configuration and the config-file loader.

Config files are plain ``dotted.key = value`` lines (``#`` starts a
comment). Values are Python literals; bare words are strings. A ``.json``
file holding the same keys, flat or nested, is accepted too. Unknown keys
are rejected with their full path.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cache import HierarchyConfig
from .latency import LatencyProfile


class ConfigError(ValueError):
    pass


@dataclass
class TlbConfig:
    entries: int = 64
    psc_entries: int = 16


@dataclass
class Countermeasures:
    privileged_only: bool = False
    noise_injection: float = 0.0  # uniform +-amplitude on CLDEMOTE, cycles


@dataclass
class EvsetConfig:
    pool_size: int = 12288
    helper_cost: int = 400  # coordination cycles per helper-thread placement
    votes: int = 3


@dataclass
class ChannelTiming:
    # receiver round starts this many cycles into each window
    rx_offset: int = 100
    # std dev of the sender's per-window offset from the shared counter
    sync_jitter: float = 15.0
    # loop overhead between back-to-back sender loads
    tx_gap: int = 4


@dataclass
class KaslrConfig:
    kernel_slots: int = 22
    threshold: int = 131


@dataclass
class MachineConfig:
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    profile: LatencyProfile = field(default_factory=LatencyProfile)
    tlb: TlbConfig = field(default_factory=TlbConfig)
    countermeasures: Countermeasures = field(default_factory=Countermeasures)
    evset: EvsetConfig = field(default_factory=EvsetConfig)
    channel: ChannelTiming = field(default_factory=ChannelTiming)
    kaslr: KaslrConfig = field(default_factory=KaslrConfig)
    seed: int = 0
    backend: str | None = None

    def to_dict(self) -> dict:
        h = self.hierarchy
        return {
            "seed": self.seed,
            "hierarchy": {
                "cores": h.cores, "slices": h.n_slices,
                "l1d": {"sets": h.l1d[0], "ways": h.l1d[1]},
                "l1i": {"sets": h.l1i[0], "ways": h.l1i[1]},
                "l2": {"sets": h.l2[0], "ways": h.l2[1]},
                "llc": {"sets": h.llc[0], "ways": h.llc[1]},
                "dir": {"ways": h.dir_ways},
            },
            "tlb": vars(self.tlb).copy(),
            "countermeasures": vars(self.countermeasures).copy(),
            "evset": vars(self.evset).copy(),
            "channel": vars(self.channel).copy(),
            "kaslr": vars(self.kaslr).copy(),
            "latency": self.profile.to_dict(),
        }


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


_SIMPLE = {
    "seed": ("seed", int),
    "backend": ("backend", str),
    "tlb.entries": ("tlb.entries", int),
    "tlb.psc_entries": ("tlb.psc_entries", int),
    "noise.sigma": ("profile.noise_sigma", float),
    "clock_ghz": ("profile.clock_ghz", float),
    "countermeasures.privileged_only": ("countermeasures.privileged_only", bool),
    "countermeasures.noise_injection": ("countermeasures.noise_injection", float),
    "evset.pool_size": ("evset.pool_size", int),
    "evset.helper_cost": ("evset.helper_cost", int),
    "evset.votes": ("evset.votes", int),
    "channel.rx_offset": ("channel.rx_offset", int),
    "channel.sync_jitter": ("channel.sync_jitter", float),
    "channel.tx_gap": ("channel.tx_gap", int),
    "kaslr.kernel_slots": ("kaslr.kernel_slots", int),
    "kaslr.threshold": ("kaslr.threshold", int),
    "latency.walk_ladder": ("profile.walk_ladder", tuple),
    "latency.walk_prefetch_hit": ("profile.walk_prefetch_hit", tuple),
    "latency.privileged_nop": ("profile.privileged_nop", int),
}
_GEOM = {"l1d", "l1i", "l2", "llc"}


def build_config(values: dict) -> MachineConfig:
    """Apply flat ``dotted.key -> value`` overrides to the defaults."""
    cfg = MachineConfig()
    hier = {"cores": 12, "slices": None, "dir_ways": 25, "l1d": [64, 12],
            "l1i": [64, 8], "l2": [2048, 16], "llc": [2048, 15]}
    for key, val in values.items():
        try:
            if key in _SIMPLE:
                path, typ = _SIMPLE[key]
                obj = cfg
                *head, last = path.split(".")
                for h in head:
                    obj = getattr(obj, h)
                setattr(obj, last, typ(val) if typ is not bool else _as_bool(val))
            elif key in ("hierarchy.cores", "hierarchy.slices"):
                hier[key.split(".")[1]] = int(val)
            elif key == "hierarchy.dir.ways":
                hier["dir_ways"] = int(val)
            elif key.startswith("hierarchy."):
                parts = key.split(".")
                if len(parts) != 3 or parts[1] not in _GEOM or parts[2] not in ("sets", "ways"):
                    raise ConfigError(f"unknown key {key!r}")
                hier[parts[1]][0 if parts[2] == "sets" else 1] = int(val)
            elif key.startswith("latency.probe."):
                kind = key.split(".", 2)[2]
                if kind not in cfg.profile.probe_tables:
                    raise ConfigError(f"unknown key {key!r}")
                hit, miss = val
                cfg.profile.probe_tables[kind] = (int(hit), int(miss))
            elif key.startswith("latency."):
                parts = key.split(".")
                table = cfg.profile.cache
                if len(parts) != 3 or parts[1] not in table or parts[2] not in table[parts[1]]:
                    raise ConfigError(f"unknown key {key!r}")
                table[parts[1]][parts[2]] = int(val)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        cfg.hierarchy = HierarchyConfig(cores=hier["cores"], l1d=tuple(hier["l1d"]),
                                        l1i=tuple(hier["l1i"]), l2=tuple(hier["l2"]),
                                        llc=tuple(hier["llc"]), dir_ways=hier["dir_ways"],
                                        slices=hier["slices"])
        cfg.profile.__post_init__()
    except ValueError as exc:
        raise ConfigError(f"hierarchy: {exc}") from exc
    if cfg.evset.votes < 1 or cfg.evset.votes % 2 == 0:
        raise ConfigError("evset.votes must be a positive odd number")
    if cfg.countermeasures.noise_injection < 0:
        raise ConfigError("countermeasures.noise_injection must be >= 0")
    return cfg


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, float)):
        return bool(v)
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def load_config(path) -> MachineConfig:
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".json":
        values = _flatten(json.loads(text)) if text.strip() else {}
    else:
        values = parse_text(text)
    return build_config(values)
