"""Exploitability characteristics of ISA extensions and the attacks they enable.

Five characteristics describe an instruction:

U  usable without privilege
I  moves lines between private caches and the LLC
M  moves lines between memory and the cache
D  reports cache state changes architecturally
S  suppresses faults on inaccessible addresses

The boolean predicates decide feasibility. Two annotations are layered on
top of them in the knowledge base: ``unproposed`` (feasible, no published
attack yet) and ``extra`` (feasible only with additional instructions that
supply the listed characteristics).
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field, replace
from importlib import resources

BITS = ("U", "I", "M", "D", "S")
ATTACKS = ("cache_attack", "noise_free", "faultless_kaslr", "fast_evset")


class Feasibility(str, enum.Enum):
    YES = "yes"
    FEASIBLE_UNPROPOSED = "feasible_unproposed"
    NEEDS_EXTRA_INSTRUCTIONS = "needs_extra_instructions"
    NO = "no"


# table symbol -> feasibility
SYMBOLS = {
    "filled": Feasibility.YES,
    "empty": Feasibility.NO,
    "half": Feasibility.FEASIBLE_UNPROPOSED,
    "filled+dagger": Feasibility.NEEDS_EXTRA_INSTRUCTIONS,
    "half+dagger": Feasibility.NEEDS_EXTRA_INSTRUCTIONS,
}


@dataclass(frozen=True)
class ExtensionProfile:
    name: str = ""
    U: bool = False
    I: bool = False  # noqa: E741
    M: bool = False
    D: bool = False
    S: bool = False

    @classmethod
    def from_bits(cls, bits, name: str = "") -> "ExtensionProfile":
        return cls(name, *(bool(b) for b in bits))

    @classmethod
    def parse(cls, text: str, name: str = "") -> "ExtensionProfile":
        """``"U,I,S"`` (letters present) or ``"1,1,0,0,1"`` (all five bits)."""
        parts = [p.strip() for p in text.replace(" ", "").split(",") if p.strip()]
        if len(parts) == 5 and all(p in ("0", "1") for p in parts):
            return cls.from_bits([p == "1" for p in parts], name)
        bad = [p for p in parts if p.upper() not in BITS]
        if bad:
            raise ValueError(f"unknown characteristic(s) {bad}; use letters from {BITS}")
        have = {p.upper() for p in parts}
        return cls.from_bits([b in have for b in BITS], name)

    def bits(self) -> tuple:
        return tuple(getattr(self, b) for b in BITS)

    def with_bits(self, letters) -> "ExtensionProfile":
        return replace(self, **{b: True for b in letters})

    def __le__(self, other: "ExtensionProfile") -> bool:
        return all(a <= b for a, b in zip(self.bits(), other.bits()))


PREDICATES = {
    "cache_attack": lambda p: p.U and (p.I or p.M),
    "noise_free": lambda p: p.U and p.D,
    "faultless_kaslr": lambda p: p.U and (p.I or p.M) and p.S,
    "fast_evset": lambda p: p.U and p.I,
}


def feasible_attacks(profile: ExtensionProfile) -> dict:
    """Boolean core: attack -> YES or NO."""
    return {a: Feasibility.YES if PREDICATES[a](profile) else Feasibility.NO
            for a in ATTACKS}


def feasible_set(profile: ExtensionProfile) -> frozenset:
    return frozenset(a for a in ATTACKS if PREDICATES[a](profile))


@dataclass(frozen=True)
class Entry:
    profile: ExtensionProfile
    expected: dict
    unproposed: frozenset = frozenset()
    extra: dict = field(default_factory=dict)


class AnnotationError(ValueError):
    pass


def classify(entry: Entry) -> dict:
    """Boolean core with the annotations applied."""
    out = {}
    p = entry.profile
    for a in ATTACKS:
        core = PREDICATES[a](p)
        if a in entry.extra:
            if core or not PREDICATES[a](p.with_bits(entry.extra[a])):
                raise AnnotationError(f"{p.name}/{a}: extra instructions annotation does not "
                                      "turn an infeasible attack into a feasible one")
            out[a] = Feasibility.NEEDS_EXTRA_INSTRUCTIONS
        elif core:
            out[a] = Feasibility.FEASIBLE_UNPROPOSED if a in entry.unproposed \
                else Feasibility.YES
        else:
            out[a] = Feasibility.NO
    return out


def load_knowledge_base(path=None) -> list:
    if path is None:
        text = resources.files("demotesim").joinpath("data/taxonomy.json").read_text()
    else:
        with open(path) as f:
            text = f.read()
    raw = json.loads(text)
    out = []
    for r in raw["instructions"]:
        prof = ExtensionProfile(r["name"], *(bool(r[b]) for b in BITS))
        unknown = set(r["expected"]) - set(ATTACKS)
        if unknown:
            raise ValueError(f"{r['name']}: unknown attacks {sorted(unknown)}")
        out.append(Entry(prof, {a: SYMBOLS[r["expected"][a]] for a in ATTACKS},
                         frozenset(r.get("unproposed", ())),
                         {a: tuple(v) for a, v in r.get("extra", {}).items()}))
    return out


@dataclass
class RowCheck:
    name: str
    ok: bool
    got: dict
    expected: dict


def verify_table(entries=None) -> list:
    """Evaluate every row and compare with its expected marks."""
    entries = entries if entries is not None else load_knowledge_base()
    out = []
    for e in entries:
        got = classify(e)
        out.append(RowCheck(e.profile.name, got == e.expected, got, e.expected))
    return out


def all_profiles() -> list:
    return [ExtensionProfile.from_bits(b) for b in itertools.product((False, True), repeat=5)]


def monotonicity_violations() -> list:
    """Pairs p <= q where q loses an attack p has (empty when monotone)."""
    profs = all_profiles()
    bad = []
    for p in profs:
        fp = feasible_set(p)
        for q in profs:
            if p <= q and not fp <= feasible_set(q):
                bad.append((p.bits(), q.bits()))
    return bad


def implication_violations() -> list:
    """Profiles where faultless_kaslr holds but cache_attack does not."""
    return [p.bits() for p in all_profiles()
            if PREDICATES["faultless_kaslr"](p) and not PREDICATES["cache_attack"](p)]


__all__ = [
    "BITS", "ATTACKS", "Feasibility", "SYMBOLS", "ExtensionProfile", "PREDICATES",
    "feasible_attacks", "feasible_set", "Entry", "AnnotationError", "classify",
    "load_knowledge_base", "RowCheck", "verify_table", "all_profiles",
    "monotonicity_violations", "implication_violations",
]
