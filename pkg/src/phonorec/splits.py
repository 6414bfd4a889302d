"""Stratified 70:15:15 train/validation/test splits.

Two modes:

* ``phoneme``: records are stratified on the target property's class.
* ``gloss``: whole glosses are stratified on their class, so every video of
  a gloss lands in the same split and test glosses are unseen in training.

Allocation per class (deterministic, independent of input order):

1. members (video ids, or glosses in gloss mode) are sorted, then shuffled
   by Fisher-Yates driven by :class:`SplitMix64` seeded with
   ``seed XOR fnv1a64("<property>\\x1f<class code>")``;
2. quotas ``ratio * n`` are rounded by largest remainder (ties favour the
   earlier split in train, val, test order);
3. any split left empty takes one member from the largest split, preferring
   a split that was rounded up;
4. the shuffled members fill train, then val, then test.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InconsistentGlossLabel, TooFewSamples
from .phonology import KINDS, PropertyKind

MASK64 = (1 << 64) - 1
SPLIT_NAMES = ("train", "val", "test")
MANIFEST_FORMAT = "phonorec.manifest/1"


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014), bit-exact.

    ``next()``::

        state = (state + 0x9E3779B97F4A7C15) mod 2**64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
        return z ^ (z >> 31)

    ``below(n)`` rejects draws ``>= 2**64 - (2**64 mod n)`` and returns
    ``draw mod n``.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates, walking i from the end down to 1."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class SplitMode(enum.Enum):
    PHONEME = "phoneme"
    GLOSS = "gloss"


@dataclass(frozen=True)
class SplitSpec:
    kind: PropertyKind
    mode: SplitMode = SplitMode.PHONEME
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError("ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-12:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)!r}")
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "seed", int(self.seed) & MASK64)

    def exact_ratios(self) -> tuple[Fraction, ...]:
        fr = [Fraction(repr(r)) for r in self.ratios]
        total = sum(fr)
        return tuple(f / total for f in fr)


@dataclass(frozen=True)
class SplitManifest:
    spec: SplitSpec
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    dataset_hash: str

    def ids(self, split: str) -> tuple[str, ...]:
        return getattr(self, split)

    def assignment(self) -> dict[str, str]:
        return {vid: name for name in SPLIT_NAMES for vid in self.ids(name)}

    def to_json(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "property": self.spec.kind.value,
            "mode": self.spec.mode.value,
            "ratios": list(self.spec.ratios),
            "seed": self.spec.seed,
            "dataset_hash": self.dataset_hash,
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_json(cls, doc: dict) -> "SplitManifest":
        spec = SplitSpec(PropertyKind(doc["property"]), SplitMode(doc["mode"]),
                         tuple(doc["ratios"]), doc["seed"])
        return cls(spec, tuple(doc["train"]), tuple(doc["val"]), tuple(doc["test"]),
                   doc["dataset_hash"])

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def dataset_hash(records: Iterable) -> str:
    """SHA-256 over the sorted (video_id, gloss, six label codes) rows."""
    rows = sorted(
        "\t".join((r.video_id, r.gloss, *(r.label[k] for k in KINDS))) for r in records
    )
    h = hashlib.sha256()
    for row in rows:
        h.update(row.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def allocate(n: int, ratios: Sequence[Fraction]) -> list[int]:
    """Largest-remainder counts for ``n`` items, each split lifted to >= 1."""
    quotas = [r * n for r in ratios]
    counts = [int(q) for q in quotas]  # floor; quotas are non-negative
    rem = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    rounded_up = set(order[:rem])
    for i in order[:rem]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] > 0:
            continue
        donors = [j for j in range(len(counts)) if counts[j] >= 2]
        if not donors:
            raise ValueError(f"cannot give every split an item with n={n}")
        preferred = [j for j in donors if j in rounded_up] or donors
        donor = max(preferred, key=lambda j: (counts[j], -j))
        counts[donor] -= 1
        rounded_up.discard(donor)
        counts[i] = 1
    return counts


def _class_rng(spec: SplitSpec, cls: str) -> SplitMix64:
    return SplitMix64(spec.seed ^ fnv1a64(f"{spec.kind.value}\x1f{cls}"))


def _assign(groups: dict[str, list[str]], spec: SplitSpec) -> dict[str, list[str]]:
    ratios = spec.exact_ratios()
    out: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    for cls in sorted(groups):
        members = sorted(groups[cls])
        _class_rng(spec, cls).shuffle(members)
        start = 0
        for name, count in zip(SPLIT_NAMES, allocate(len(members), ratios)):
            out[name].extend(members[start:start + count])
            start += count
    return out


def split_phoneme(records: Sequence, spec: SplitSpec) -> SplitManifest:
    groups: dict[str, list[str]] = defaultdict(list)
    for r in records:
        groups[r.label[spec.kind]].append(r.video_id)
    for cls, ids in sorted(groups.items()):
        if len(ids) < 3:
            raise TooFewSamples(cls, len(ids), "records")
    parts = _assign(groups, spec)
    return SplitManifest(spec, *(tuple(sorted(parts[n])) for n in SPLIT_NAMES),
                         dataset_hash(records))


def gloss_labels(records: Sequence, kind: PropertyKind) -> dict[str, str]:
    labels: dict[str, set[str]] = defaultdict(set)
    for r in records:
        labels[r.gloss].add(r.label[kind])
    for gloss, codes in sorted(labels.items()):
        if len(codes) > 1:
            raise InconsistentGlossLabel(gloss, sorted(codes))
    return {g: next(iter(c)) for g, c in labels.items()}


def split_gloss(records: Sequence, spec: SplitSpec) -> SplitManifest:
    labels = gloss_labels(records, spec.kind)
    groups: dict[str, list[str]] = defaultdict(list)
    for gloss, cls in labels.items():
        groups[cls].append(gloss)
    for cls, glosses in sorted(groups.items()):
        if len(glosses) < 3:
            raise TooFewSamples(cls, len(glosses), "glosses")
    parts = _assign(groups, spec)
    where = {g: name for name, gs in parts.items() for g in gs}
    ids: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    for r in records:
        ids[where[r.gloss]].append(r.video_id)
    return SplitManifest(spec, *(tuple(sorted(ids[n])) for n in SPLIT_NAMES),
                         dataset_hash(records))


def make_split(records: Sequence, spec: SplitSpec) -> SplitManifest:
    if spec.mode is SplitMode.GLOSS:
        return split_gloss(records, spec)
    return split_phoneme(records, spec)


# -- verification -------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str


@dataclass
class VerificationReport:
    violations: list[Violation] = field(default_factory=list)
    # class -> split -> count (videos in phoneme mode, glosses in gloss mode)
    table: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def add(self, rule: str, detail: str) -> None:
        self.violations.append(Violation(rule, detail))


def allowed_deviation(n: int, ratios: Sequence[float]) -> float:
    """Per-split tolerance on ``|count - ratio * n|``.

    One item, widened by the mass the min-1 rule has to move when some
    quota is below one (a 3-member class must go 1/1/1 whatever the ratios).
    """
    forced = sum(max(0.0, 1.0 - r * n) for r in ratios)
    return 1.0 + forced


def verify_split(manifest: SplitManifest, records: Sequence) -> VerificationReport:
    report = VerificationReport()
    spec = manifest.spec
    by_id = {r.video_id: r for r in records}

    seen: dict[str, str] = {}
    for name in SPLIT_NAMES:
        for vid in manifest.ids(name):
            if vid not in by_id:
                report.add("UnknownId", f"{vid} ({name}) is not in the dataset")
            if vid in seen:
                report.add("Disjointness", f"{vid} is in both {seen[vid]} and {name}")
            else:
                seen[vid] = name
    for vid in sorted(by_id.keys() - seen.keys()):
        report.add("Coverage", f"{vid} is not assigned to any split")

    gloss_mode = spec.mode is SplitMode.GLOSS
    if gloss_mode:
        gloss_splits: dict[str, set[str]] = defaultdict(set)
        for vid, name in seen.items():
            if vid in by_id:
                gloss_splits[by_id[vid].gloss].add(name)
        for gloss, names in sorted(gloss_splits.items()):
            if len(names) > 1:
                report.add("GlossLeak", f"gloss {gloss!r} spans {', '.join(sorted(names))}")

    # Counting unit: videos in phoneme mode, glosses in gloss mode.
    def unit(r) -> str:
        return r.gloss if gloss_mode else r.video_id

    members: dict[str, set[str]] = defaultdict(set)
    for r in records:
        members[r.label[spec.kind]].add(unit(r))
    units: dict[str, dict[str, set[str]]] = {cls: defaultdict(set) for cls in members}
    for vid, name in seen.items():
        if vid in by_id:
            r = by_id[vid]
            units[r.label[spec.kind]][name].add(unit(r))
    totals = {cls: len(m) for cls, m in members.items()}

    for cls in sorted(units):
        n = totals[cls]
        tol = allowed_deviation(n, spec.ratios)
        report.table[cls] = {}
        for name, ratio in zip(SPLIT_NAMES, spec.ratios):
            count = len(units[cls].get(name, ()))
            report.table[cls][name] = count
            if count == 0:
                report.add("MissingClass", f"class {cls!r} absent from {name}")
            dev = abs(count - ratio * n)
            if dev > tol + 1e-9:
                report.add("RatioDeviation",
                           f"class {cls!r} has {count} in {name}, expected {ratio * n:.2f}")
    return report


def format_split_table(report: VerificationReport) -> str:
    width = max([len("class")] + [len(c) for c in report.table])
    lines = [f"{'class':<{width}}  {'train':>6} {'val':>6} {'test':>6}"]
    for cls, row in report.table.items():
        lines.append(f"{cls:<{width}}  {row['train']:>6} {row['val']:>6} {row['test']:>6}")
    return "\n".join(lines) + "\n"
