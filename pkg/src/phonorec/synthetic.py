"""Synthetic skeleton data: a separable training set and a tiny on-disk fixture.

Classes are encoded by where the right hand sits relative to the body: class
``c`` shifts the right wrist and its finger joints along one of the six axis
directions (+x, -x, +y, -y, +z, -z). Everything else is a shared template with
smooth per-video motion and Gaussian jitter.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .ingest import (
    INDEX_HEADER,
    LEXICON_HEADER,
    UPPER_BODY_JOINTS,
    SignRecord,
    SkeletonSequence,
    TrackerKind,
)
from .phonology import PhonologicalLabel, PropertyKind, builtin_taxonomy

# codes used for the properties the synthetic data does not vary
_FILLER = {
    PropertyKind.FLEXION: "1",
    PropertyKind.MAJOR_LOCATION: "Neutral",
    PropertyKind.MINOR_LOCATION: "Neutral",
    PropertyKind.MOVEMENT: "Straight",
    PropertyKind.SELECTED_FINGERS: "imrp",
    PropertyKind.SIGN_TYPE: "One Handed",
}

_DIRECTIONS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                       dtype=np.float64)

RIGHT_HAND = tuple(i for i, n in enumerate(UPPER_BODY_JOINTS)
                   if n == "right_wrist" or (n.startswith("right_") and n not in
                                             ("right_eye", "right_shoulder", "right_elbow")))


def _template(rng: np.random.Generator, joints: int) -> np.ndarray:
    base = rng.normal(0.0, 1.0, size=(joints, 3))
    li, ri = UPPER_BODY_JOINTS.index("left_shoulder"), UPPER_BODY_JOINTS.index("right_shoulder")
    base[li] = (-0.5, 0.0, 0.0)
    base[ri] = (0.5, 0.0, 0.0)
    return base


def make_sequence(cls: int, rng: np.random.Generator, frames: int = 150, offset: float = 1.0,
                  noise: float = 0.05, template: np.ndarray | None = None) -> np.ndarray:
    """One ``frames x 27 x 3`` sequence of class ``cls`` (0..5)."""
    joints = len(UPPER_BODY_JOINTS)
    if template is None:
        template = _template(np.random.default_rng(0), joints)
    t = np.linspace(0.0, 1.0, frames)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, size=(1, joints, 3))
    data = template[None] + 0.1 * np.sin(2 * np.pi * t + phase)
    data[:, RIGHT_HAND] += offset * _DIRECTIONS[cls % len(_DIRECTIONS)]
    data += rng.normal(0.0, noise, size=data.shape)
    return data


def separable_dataset(n_per_class: int = 50, kind: PropertyKind = PropertyKind.MOVEMENT,
                      n_classes: int = 6, glosses_per_class: int = 10, frames: int = 150,
                      seed: int = 0, offset: float = 1.0, noise: float = 0.05) -> list[SignRecord]:
    """Records whose ``kind`` label is recoverable from the right-hand position."""
    codes = builtin_taxonomy().codes(kind)
    if n_classes > min(len(codes), len(_DIRECTIONS)):
        raise ValueError(f"{kind.value} supports at most {min(len(codes), len(_DIRECTIONS))} classes")
    rng = np.random.default_rng(seed)
    template = _template(np.random.default_rng(seed + 1), len(UPPER_BODY_JOINTS))
    records = []
    for c in range(n_classes):
        fields = {k.value: v for k, v in _FILLER.items()}
        fields[kind.value] = codes[c]
        label = PhonologicalLabel.from_mapping(fields)
        for i in range(n_per_class):
            g = i % glosses_per_class
            data = make_sequence(c, rng, frames, offset, noise, template)
            seq = SkeletonSequence(data, UPPER_BODY_JOINTS, TrackerKind.MOCAP3D)
            records.append(SignRecord(f"syn{c:02d}{i:04d}", f"gloss{c:02d}{g:03d}",
                                      f"signer{i % 7}", seq, label))
    return records


# -- on-disk fixture ------------------------------------------------------------------

FIXTURE_GLOSSES = [
    ("book", {"flexion": "2", "major_location": "Neutral", "minor_location": "Neutral",
              "movement": "Curved", "selected_fingers": "imrp",
              "sign_type": "Symmetrical Or Alternating"}),
    ("drink", {"flexion": "4", "major_location": "Head", "minor_location": "Mouth",
               "movement": "Curved", "selected_fingers": "imrp",
               "sign_type": "One Handed"}),
    ("help", {"flexion": "1", "major_location": "Neutral", "minor_location": "Neutral",
              "movement": "Straight", "selected_fingers": "imrp",
              "sign_type": "Asymmetrical Different Handshape"}),
]


def write_fixture(out_dir, videos_per_gloss: int = 2, frames: int = 40, seed: int = 0) -> dict:
    """Write lexicon.csv, index.csv and keypoints/*.json for a three-gloss fixture.

    Keypoint files carry one joint beyond the upper-body set so that joint
    selection is exercised. Returns the paths written.
    """
    out = Path(out_dir)
    kp_dir = out / "keypoints"
    kp_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = list(UPPER_BODY_JOINTS) + ["left_hip"]
    template = _template(rng, len(UPPER_BODY_JOINTS))
    with open(out / "lexicon.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEXICON_HEADER)
        for gloss, label in FIXTURE_GLOSSES:
            w.writerow([gloss.upper()] + [label[k] for k in LEXICON_HEADER[1:]])
    rows = []
    for g, (gloss, _) in enumerate(FIXTURE_GLOSSES):
        for v in range(videos_per_gloss):
            vid = f"{gloss}_{v:02d}"
            data = make_sequence(g, rng, frames - 3 * v, template=template)
            extra = data.mean(axis=1, keepdims=True) - 1.0
            frames_out = np.round(np.concatenate([data, extra], axis=1), 6)
            doc = {"video_id": vid, "tracker": TrackerKind.MOCAP3D.value, "joint_names": names,
                   "frames": frames_out.tolist()}
            (kp_dir / f"{vid}.json").write_text(json.dumps(doc) + "\n", encoding="utf-8")
            rows.append([vid, gloss, f"s{v}", f"keypoints/{vid}.json", TrackerKind.MOCAP3D.value])
    with open(out / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        w.writerows(rows)
    return {"lexicon": out / "lexicon.csv", "index": out / "index.csv", "keypoints": out}
