"""Dataset construction: lexicon x video-index join and keypoint preparation.

File formats
------------
Lexicon CSV::

    gloss,flexion,major_location,minor_location,movement,selected_fingers,sign_type

Video index CSV::

    video_id,gloss,signer_id,keypoint_path,tracker

Keypoint JSON (one per video)::

    {"video_id": "...", "tracker": "mocap3d" | "pose2d",
     "joint_names": [J names], "frames": [T x J x 3 numbers]}

For ``mocap3d`` the channels are (x, y, z); for ``pose2d`` they are
(x, y, score) with score a detection confidence in [0, 1].
"""

from __future__ import annotations

import csv
import enum
import json
import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateGloss,
    EmptySequence,
    FormatError,
    MissingJoint,
    MissingKeypointFile,
    NonFiniteValue,
    ParseError,
    UnknownValue,
)
from .phonology import KINDS, PhonologicalLabel, Taxonomy, builtin_taxonomy, validate_label

LEXICON_HEADER = ("gloss",) + tuple(k.value for k in KINDS)
INDEX_HEADER = ("video_id", "gloss", "signer_id", "keypoint_path", "tracker")
DEFAULT_FRAMES = 150

UPPER_BODY_JOINTS: tuple[str, ...] = (
    "nose",
    "left_eye",
    "right_eye",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
) + tuple(
    name
    for side in ("left", "right")
    for name in (
        f"{side}_thumb_tip",
        *(f"{side}_{finger}_{knuckle}"
          for finger in ("index", "middle", "ring", "pinky")
          for knuckle in ("base_knuckle", "tip_knuckle")),
    )
)
assert len(UPPER_BODY_JOINTS) == 27


class DegenerateScale(UserWarning):
    """Shoulders coincide in frame 0, so coordinates were only translated."""


class ScoreOutOfRange(UserWarning):
    pass


class TrackerKind(enum.Enum):
    MOCAP3D = "mocap3d"
    POSE2D = "pose2d"

    @property
    def channels(self) -> tuple[str, str, str]:
        return ("x", "y", "z") if self is TrackerKind.MOCAP3D else ("x", "y", "score")

    @property
    def coord_channels(self) -> int:
        """How many leading channels are spatial coordinates."""
        return 3 if self is TrackerKind.MOCAP3D else 2


def normalize_gloss(gloss: str) -> str:
    return unicodedata.normalize("NFC", gloss).casefold().strip()


@dataclass(frozen=True)
class LexiconEntry:
    gloss: str
    label: PhonologicalLabel


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    gloss: str
    signer_id: str
    keypoint_path: str
    tracker: TrackerKind


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    data: np.ndarray
    joint_names: tuple[str, ...]
    tracker: TrackerKind

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise FormatError(f"skeleton data must be T x J x 3, got shape {data.shape}")
        if data.shape[0] < 1:
            raise EmptySequence("skeleton sequence has no frames")
        if data.shape[1] != len(self.joint_names):
            raise FormatError(f"{data.shape[1]} joints in data but {len(self.joint_names)} joint names")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return (isinstance(other, SkeletonSequence) and self.tracker is other.tracker
                and self.joint_names == other.joint_names
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class SignRecord:
    video_id: str
    gloss: str
    signer_id: str
    sequence: SkeletonSequence | None
    label: PhonologicalLabel


@dataclass
class JoinReport:
    matched_videos: int = 0
    matched_glosses: int = 0
    unmatched_lexicon_glosses: list[str] = field(default_factory=list)
    unmatched_index_glosses: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "matched_videos": self.matched_videos,
            "matched_glosses": self.matched_glosses,
            "unmatched_lexicon_glosses": self.unmatched_lexicon_glosses,
            "unmatched_index_glosses": self.unmatched_index_glosses,
        }


def _read_csv(path, header: Sequence[str]):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1, path=path) from None
        if tuple(c.strip() for c in first) != tuple(header):
            raise ParseError(f"expected header {','.join(header)}", line=1, path=path)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}",
                                 line=reader.line_num, path=path)
            yield reader.line_num, [c.strip() for c in row]


def parse_lexicon(path, tax: Taxonomy | None = None) -> list[LexiconEntry]:
    tax = tax or builtin_taxonomy()
    entries: list[LexiconEntry] = []
    seen: dict[str, int] = {}
    for line, row in _read_csv(path, LEXICON_HEADER):
        gloss = normalize_gloss(row[0])
        if not gloss:
            raise ParseError("empty gloss", line=line, path=path)
        if gloss in seen:
            raise DuplicateGloss(gloss, line=line)
        seen[gloss] = line
        try:
            label = validate_label(PhonologicalLabel(*row[1:]), tax)
        except UnknownValue as err:
            raise UnknownValue(err.kind, err.code, line=line) from None
        entries.append(LexiconEntry(gloss, label))
    return entries


def parse_index(path) -> list[VideoRecord]:
    records: list[VideoRecord] = []
    seen: set[str] = set()
    for line, (video_id, gloss, signer, kp_path, tracker) in _read_csv(path, INDEX_HEADER):
        if not video_id:
            raise ParseError("empty video_id", line=line, path=path)
        if video_id in seen:
            raise ParseError(f"duplicate video_id {video_id!r}", line=line, path=path)
        seen.add(video_id)
        try:
            kind = TrackerKind(tracker.lower())
        except ValueError:
            raise ParseError(f"unknown tracker {tracker!r}", line=line, path=path) from None
        records.append(VideoRecord(video_id, normalize_gloss(gloss), signer, kp_path, kind))
    return records


def cross_reference(lexicon: Iterable[LexiconEntry], index: Iterable[VideoRecord]):
    """Inner join of videos onto lexicon entries by normalized gloss.

    Returns ``(matched, report)`` with ``matched`` a list of
    ``(VideoRecord, PhonologicalLabel)`` pairs in index order.
    """
    by_gloss = {normalize_gloss(e.gloss): e.label for e in lexicon}
    index = list(index)
    matched = [(v, by_gloss[normalize_gloss(v.gloss)]) for v in index
               if normalize_gloss(v.gloss) in by_gloss]
    index_glosses = {normalize_gloss(v.gloss) for v in index}
    report = JoinReport(
        matched_videos=len(matched),
        matched_glosses=len(index_glosses & by_gloss.keys()),
        unmatched_lexicon_glosses=sorted(by_gloss.keys() - index_glosses),
        unmatched_index_glosses=sorted(index_glosses - by_gloss.keys()),
    )
    return matched, report


def load_keypoints(path, tracker: TrackerKind) -> SkeletonSequence:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err.msg} at line {err.lineno})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    for key in ("video_id", "tracker", "joint_names", "frames"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    if doc["tracker"] != tracker.value:
        raise FormatError(f"{path}: tracker is {doc['tracker']!r}, expected {tracker.value!r}")
    names = doc["joint_names"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError(f"{path}: joint_names must be a list of strings")
    if len(set(names)) != len(names):
        raise FormatError(f"{path}: duplicate joint names")
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise FormatError(f"{path}: frames must be a non-empty list")
    try:
        data = np.array(frames, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{path}: frames must be a T x J x 3 array of numbers") from None
    if data.shape != (len(frames), len(names), 3):
        raise FormatError(f"{path}: frames have shape {data.shape}, expected "
                          f"({len(frames)}, {len(names)}, 3)")
    bad = ~np.isfinite(data)
    if bad.any():
        t, j, _ = np.argwhere(bad)[0]
        raise NonFiniteValue(int(t), names[j])
    if tracker is TrackerKind.POSE2D:
        scores = data[:, :, 2]
        if (scores < 0).any() or (scores > 1).any():
            warnings.warn(f"{path}: confidence scores outside [0, 1]", ScoreOutOfRange, stacklevel=2)
    return SkeletonSequence(data, tuple(names), tracker)


def select_upper_body(seq: SkeletonSequence) -> SkeletonSequence:
    """Keep the 27 upper-body joints, reordered canonically."""
    pos = {name: i for i, name in enumerate(seq.joint_names)}
    for name in UPPER_BODY_JOINTS:
        if name not in pos:
            raise MissingJoint(name)
    idx = [pos[name] for name in UPPER_BODY_JOINTS]
    return SkeletonSequence(seq.data[:, idx, :].copy(), UPPER_BODY_JOINTS, seq.tracker)


def loop_indices(frames: int, target: int) -> np.ndarray:
    if frames < 1:
        raise EmptySequence("cannot normalize an empty sequence")
    return np.arange(target) % frames


def normalize_length(seq: SkeletonSequence, target_frames: int = DEFAULT_FRAMES) -> SkeletonSequence:
    """Truncate long sequences; loop short ones from frame 0 to ``target_frames``."""
    if target_frames < 1:
        raise ValueError("target_frames must be positive")
    idx = loop_indices(seq.frames, target_frames)
    return SkeletonSequence(seq.data[idx].copy(), seq.joint_names, seq.tracker)


def normalize_coords(seq: SkeletonSequence, eps: float = 1e-9) -> SkeletonSequence:
    """Centre on the frame-0 shoulder midpoint and scale to unit shoulder width.

    Only coordinate channels change; the pose2d score channel is untouched.
    """
    try:
        left = seq.joint_names.index("left_shoulder")
        right = seq.joint_names.index("right_shoulder")
    except ValueError:
        missing = "left_shoulder" if "left_shoulder" not in seq.joint_names else "right_shoulder"
        raise MissingJoint(missing) from None
    nc = seq.tracker.coord_channels
    data = seq.data.copy()
    a, b = data[0, left, :nc], data[0, right, :nc]
    centre = (a + b) / 2.0
    width = float(np.linalg.norm(a - b))
    data[:, :, :nc] -= centre
    if width < eps:
        warnings.warn("shoulders coincide in frame 0; skipping scale normalization",
                      DegenerateScale, stacklevel=2)
    else:
        data[:, :, :nc] /= width
    return SkeletonSequence(data, seq.joint_names, seq.tracker)


def prepare_sequence(seq: SkeletonSequence, target_frames: int = DEFAULT_FRAMES,
                     coords: bool = True) -> SkeletonSequence:
    seq = normalize_length(select_upper_body(seq), target_frames)
    return normalize_coords(seq) if coords else seq


# -- dataset archive ----------------------------------------------------------
#
# <dir>/dataset.json   metadata + labels, records in archive order
# <dir>/sequences.npy  float64 array (N, T, 27, 3), row i belongs to records[i]

DATASET_FORMAT = "phonorec.dataset/1"


def save_dataset(records: Sequence[SignRecord], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not records:
        raise ValueError("refusing to write an empty dataset")
    first = records[0].sequence
    trackers = {r.sequence.tracker for r in records}
    if len(trackers) != 1:
        raise FormatError("a dataset holds sequences from a single tracker")
    meta = {
        "format": DATASET_FORMAT,
        "tracker": first.tracker.value,
        "joint_names": list(first.joint_names),
        "frames": first.frames,
        "records": [
            {"video_id": r.video_id, "gloss": r.gloss, "signer_id": r.signer_id,
             "label": r.label.as_dict()}
            for r in records
        ],
    }
    arr = np.stack([r.sequence.data for r in records]).astype("<f8")
    (out / "dataset.json").write_text(json.dumps(meta, indent=1, ensure_ascii=False) + "\n",
                                      encoding="utf-8")
    with open(out / "sequences.npy", "wb") as fh:
        np.save(fh, arr, allow_pickle=False)


def load_dataset(path) -> list[SignRecord]:
    path = Path(path)
    meta = json.loads((path / "dataset.json").read_text(encoding="utf-8"))
    if meta.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a {DATASET_FORMAT} archive")
    arr = np.load(path / "sequences.npy", allow_pickle=False)
    if arr.shape[0] != len(meta["records"]):
        raise FormatError(f"{path}: {arr.shape[0]} sequences for {len(meta['records'])} records")
    tracker = TrackerKind(meta["tracker"])
    names = tuple(meta["joint_names"])
    return [
        SignRecord(r["video_id"], r["gloss"], r["signer_id"],
                   SkeletonSequence(arr[i], names, tracker),
                   PhonologicalLabel.from_mapping(r["label"]))
        for i, r in enumerate(meta["records"])
    ]


def stack_sequences(records: Sequence[SignRecord]) -> np.ndarray:
    return np.stack([r.sequence.data for r in records])


def gloss_multiplicity(index: Iterable[VideoRecord]) -> Counter:
    return Counter(normalize_gloss(v.gloss) for v in index)


def build_dataset(lexicon_path, index_path, keypoint_root, target_frames: int = DEFAULT_FRAMES,
                  coords: bool = True, tax: Taxonomy | None = None) -> tuple[list[SignRecord], JoinReport]:
    """Join lexicon and index, then load and prepare every matched video's keypoints.

    Relative ``keypoint_path`` entries resolve against ``keypoint_root``.
    """
    matched, report = cross_reference(parse_lexicon(lexicon_path, tax), parse_index(index_path))
    root = Path(keypoint_root)
    records = []
    for video, label in matched:
        path = root / video.keypoint_path
        if not path.is_file():
            raise MissingKeypointFile(video.video_id, str(path))
        seq = prepare_sequence(load_keypoints(path, video.tracker), target_frames, coords)
        records.append(SignRecord(video.video_id, video.gloss, video.signer_id, seq, label))
    return records, report
