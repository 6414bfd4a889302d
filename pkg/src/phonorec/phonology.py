"""Phonological properties, their closed value inventories and label checks.

The built-in inventory follows ASL-Lex value definitions; each value also
carries its number of videos in WLASL-Lex (10017 videos in total), so every
kind's cardinalities sum to 10017.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import EmptyDataset, ParseError, UnknownValue

__all__ = [
    "PropertyKind",
    "PropertyValue",
    "Taxonomy",
    "PhonologicalLabel",
    "builtin_taxonomy",
    "validate_label",
    "majority_value",
    "TOTAL_VIDEOS",
]

TOTAL_VIDEOS = 10017


class PropertyKind(enum.Enum):
    FLEXION = "flexion"
    MAJOR_LOCATION = "major_location"
    MINOR_LOCATION = "minor_location"
    MOVEMENT = "movement"
    SELECTED_FINGERS = "selected_fingers"
    SIGN_TYPE = "sign_type"

    @classmethod
    def parse(cls, text: str) -> "PropertyKind":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {
            "majlocation": "major_location",
            "minlocation": "minor_location",
            "fingers": "selected_fingers",
            "signtype": "sign_type",
        }
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown property {text!r}; expected one of "
                             f"{', '.join(k.value for k in cls)}") from None

    @property
    def title(self) -> str:
        return self.value.replace("_", " ").title()


KINDS: tuple[PropertyKind, ...] = tuple(PropertyKind)


@dataclass(frozen=True)
class PropertyValue:
    kind: PropertyKind
    code: str
    definition: str
    cardinality: int


# (code, definition, cardinality) in table order.
_SELECTED_FINGERS = [
    ("imrp", "index, middle, ring, pinky finger", 4824),
    ("imr", "index, middle, ring finger", 95),
    ("mrp", "middle, ring, pinky finger", 28),
    ("im", "index, middle finger", 1296),
    ("ip", "index, pinky finger", 51),
    ("mr", "middle, ring finger", 0),
    ("mp", "middle, pinky finger", 0),
    ("rp", "ring, pinky finger", 0),
    ("i", "index finger", 2547),
    ("m", "middle finger", 259),
    ("r", "ring finger", 0),
    ("p", "pinky", 407),
    ("thumb", "thumb", 510),
]

_MAJOR_LOCATION = [
    ("Head", "Sign is produced on or near the head", 3137),
    ("Arm", "Sign is produced on or near the arm", 219),
    ("Body", "Sign is produced on or near the trunk", 1019),
    ("Hand", "Sign is produced on or near the non-dominant hand", 2194),
    ("Neutral", "Sign is not produced in another location on the body", 3448),
    ("Other", "Sign is produced in another unspecified location on the body", 0),
]

_FLEXION = [
    ("1", "Fully open: no joints of selected fingers are flexed", 5037),
    ("2", "Bent (closed): non-base joints are flexed", 693),
    ("3", "Flat-open: base joints flexed less than 90 degrees", 909),
    ("4", "Flat-closed: base joints flexed equal to or more that 90 degrees", 507),
    ("5", "Curved open: base and non-base joints flexed without contact", 1130),
    ("6", "Curved closed: base and non-base joints flexed with contact", 642),
    ("7", "Fully closed: base and non-base joints fully flexed", 795),
    ("Stacked", "Stacked: Flexion of selected fingers differs", 123),
    ("Crossed", "Crossed", 181),
]

_MINOR_LOCATION = [
    ("HeadTop", "Sign is produced on top of the head", 20),
    ("Forehead", "Sign is produced at the forehead", 246),
    ("Eye", "Sign is produced near the eye", 616),
    ("CheekNose", "Sign is produced on the cheek or nose", 511),
    ("UpperLip", "Sign is produced on the upper lip", 53),
    ("Mouth", "Sign is produced on the mouth", 431),
    ("Chin", "Sign is produced on the chin", 717),
    ("UnderChin", "Sign is produced under the chin", 74),
    ("UpperArm", "Sign is produced on the upper arm", 39),
    ("ElbowFront", "Sign is produced in the crook of the elbow", 0),
    ("ElbowBack", "Sign is produced on the outside of the elbow", 13),
    ("ForearmBack", "Sign is produced on the outside of the forearm", 32),
    ("ForearmFront", "Sign is produced on the inside of the forearm", 10),
    ("ForearmUlnar", "Sign is produced on the ulnar side of the forearm", 56),
    ("WristBack", "Sign is produced on the back of the wriset", 23),
    ("WristFront", "Sign is produced on the front of the wrist", 0),
    ("Neck", "Sign is produced on the neck", 68),
    ("Shoulder", "Sign is produced on the shoulder", 101),
    ("Clavicle", "Sign is produced on the clavicle", 419),
    ("TorsoTop", "Sign is produced in the upper third of the torso", 0),
    ("TorsoMid", "Sign is produced in the middle third of the torso", 0),
    ("TorsoBottom", "Sign is produced in the bottom third of the torso", 19),
    ("Waist", "Sign is produced at the waist", 34),
    ("Hips", "Sign is produced on the hips", 59),
    ("Palm", "Sign is produced on the plam of the non-dominant hand", 925),
    ("FingerFront", "Sign is produced on the front of the fingers of the non-dominant hand", 99),
    ("PalmBack", "Sign is produced on the back of the palm of the non-dominant hand", 218),
    ("FingerBack", "Sign is produced on the back of the fingers of the non-dominant hand", 186),
    ("FingerRadial", "Sign is produced on the radial side of the non-dominant hand", 410),
    ("FingerUlnar", "Sign is produced on the ulnar side of the non-dominant hand", 40),
    ("FingerTip", "Sign is produced on the tip of the fingers of the non-dominant hand", 158),
    ("Heel", "Sign is produced on the heel of the non-dominant hand", 88),
    ("Other", "Sign is produced in an unspecified location on the body", 707),
    ("Neutral", "Sign is not produced on or near the body", 3390),
]

_SIGN_TYPE = [
    ("One Handed", "Sign only recruits one hand", 3939),
    ("Symmetrical Or Alternating",
     "Sign recruits both hands. Phonological specifications for both hands are identical. "
     "Movement of both hands is either symmetrical or alternating", 3358),
    ("Asymmetrical Same Handshape",
     "Sign recruits both hands. Only the dominant hand moves. The location and orientation "
     "of the hands may differ, but the other specifications of handshape are the same. "
     "Non-Dominant hand must be an unmarked handshape (B A S 1 C O 5)", 938),
    ("Asymmetrical Different Handshape",
     "Sign recruits both hands. Only the dominant hand moves. The location and orientation "
     "of the hands may differ, and the other specifications of handshape are not the same. "
     "Non-Dominant hand must be an unmarked handshape (B A S 1 C O 5)", 1639),
    ("Other", "Sign violates Battison's Symmetry and Dominance Conditions", 143),
]

_MOVEMENT = [
    ("Straight", "Straight movement of the dominant hand through xyz space", 1938),
    ("Curved",
     "Single arc movement of the dominant hand through xyz space. "
     "Hands may or may not make contact with multiple locations", 1255),
    ("BackAndForth", "Sequence of more than one straight or curved movements", 3549),
    ("Circular",
     "Circular movement of the dominant hand through space. "
     "Rotation alone does not constitute a circular movement", 1129),
    ("None", "Entire sign (or first free morpheme) does not have a path movement", 1748),
    ("Other", "Sign has another unspecified path movement", 398),
]

_BUILTIN = {
    PropertyKind.FLEXION: _FLEXION,
    PropertyKind.MAJOR_LOCATION: _MAJOR_LOCATION,
    PropertyKind.MINOR_LOCATION: _MINOR_LOCATION,
    PropertyKind.MOVEMENT: _MOVEMENT,
    PropertyKind.SELECTED_FINGERS: _SELECTED_FINGERS,
    PropertyKind.SIGN_TYPE: _SIGN_TYPE,
}


class Taxonomy:
    """Immutable per-kind ordered value inventory."""

    def __init__(self, values: Mapping[PropertyKind, Iterable[PropertyValue]]):
        table: dict[PropertyKind, tuple[PropertyValue, ...]] = {}
        for kind in KINDS:
            vals = tuple(values.get(kind, ()))
            codes = [v.code for v in vals]
            if len(set(codes)) != len(codes):
                dup = next(c for c in codes if codes.count(c) > 1)
                raise ValueError(f"duplicate code {dup!r} under {kind.value}")
            if any(v.kind is not kind for v in vals):
                raise ValueError(f"value filed under the wrong kind in {kind.value}")
            table[kind] = vals
        self._values = MappingProxyType(table)
        self._index = MappingProxyType(
            {k: MappingProxyType({v.code: i for i, v in enumerate(vs)}) for k, vs in table.items()}
        )

    def values(self, kind: PropertyKind) -> tuple[PropertyValue, ...]:
        return self._values[kind]

    def codes(self, kind: PropertyKind) -> tuple[str, ...]:
        return tuple(v.code for v in self._values[kind])

    def supported_codes(self, kind: PropertyKind) -> tuple[str, ...]:
        """Codes with nonzero cardinality, in table order."""
        return tuple(v.code for v in self._values[kind] if v.cardinality > 0)

    def value(self, kind: PropertyKind, code: str) -> PropertyValue:
        code = code.strip()
        try:
            return self._values[kind][self._index[kind][code]]
        except KeyError:
            raise UnknownValue(kind, code) from None

    def order(self, kind: PropertyKind, code: str) -> int:
        """Position of ``code`` in the table order of ``kind``."""
        try:
            return self._index[kind][code.strip()]
        except KeyError:
            raise UnknownValue(kind, code) from None

    def __contains__(self, item) -> bool:
        kind, code = item
        return code.strip() in self._index[kind]

    def total(self, kind: PropertyKind) -> int:
        return sum(v.cardinality for v in self._values[kind])

    def expand(self, kind: PropertyKind) -> list[str]:
        """One code per counted video, in table order."""
        return [v.code for v in self._values[kind] for _ in range(v.cardinality)]

    # JSON layout: {kind: [[code, definition, cardinality], ...]}
    def to_json(self) -> dict:
        return {
            kind.value: [[v.code, v.definition, v.cardinality] for v in self._values[kind]]
            for kind in KINDS
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Taxonomy":
        missing = [k.value for k in KINDS if k.value not in doc]
        if missing:
            raise ParseError(f"taxonomy is missing kinds: {', '.join(missing)}")
        values = {}
        for kind in KINDS:
            rows = []
            for row in doc[kind.value]:
                if len(row) != 3:
                    raise ParseError(f"{kind.value}: expected [code, definition, cardinality], got {row!r}")
                code, definition, card = row
                if not isinstance(card, int) or card < 0:
                    raise ParseError(f"{kind.value}/{code}: cardinality must be a non-negative integer")
                rows.append(PropertyValue(kind, str(code).strip(), str(definition), card))
            values[kind] = rows
        return cls(values)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Taxonomy":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other):
        return isinstance(other, Taxonomy) and dict(self._values) == dict(other._values)

    def __hash__(self):
        return hash(tuple(self._values[k] for k in KINDS))


_builtin: Taxonomy | None = None


def builtin_taxonomy() -> Taxonomy:
    global _builtin
    if _builtin is None:
        _builtin = Taxonomy({
            kind: [PropertyValue(kind, c, d, n) for c, d, n in rows]
            for kind, rows in _BUILTIN.items()
        })
    return _builtin


@dataclass(frozen=True)
class PhonologicalLabel:
    flexion: str
    major_location: str
    minor_location: str
    movement: str
    selected_fingers: str
    sign_type: str

    def __getitem__(self, kind: PropertyKind) -> str:
        return getattr(self, kind.value)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "PhonologicalLabel":
        def get(kind):
            if kind in data:
                return str(data[kind]).strip()
            return str(data[kind.value]).strip()
        return cls(*(get(k) for k in KINDS))

    def as_dict(self) -> dict[str, str]:
        return {k.value: self[k] for k in KINDS}

    def as_tuple(self) -> tuple[str, ...]:
        return tuple(self[k] for k in KINDS)


def validate_label(label: PhonologicalLabel, tax: Taxonomy | None = None) -> PhonologicalLabel:
    """Return ``label`` with trimmed codes; raise UnknownValue on the first bad kind."""
    tax = tax or builtin_taxonomy()
    codes = []
    for kind in KINDS:
        code = label[kind].strip()
        if (kind, code) not in tax:
            raise UnknownValue(kind, code)
        codes.append(code)
    return PhonologicalLabel(*codes)


def majority_value(kind: PropertyKind, labels: Iterable[PhonologicalLabel | str],
                   tax: Taxonomy | None = None) -> str:
    """Most frequent code of ``kind``; ties go to the value listed first in the taxonomy."""
    tax = tax or builtin_taxonomy()
    counts = Counter(lab if isinstance(lab, str) else lab[kind] for lab in labels)
    if not counts:
        raise EmptyDataset(f"cannot take the majority {kind.value} of an empty label set")
    return max(counts, key=lambda c: (counts[c], -tax.order(kind, c)))
