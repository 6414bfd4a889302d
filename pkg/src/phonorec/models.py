"""Classifiers over (150, 27, 3) skeleton sequences, and the skeleton graph.

All trainable models are written functionally: ``forward(params, x)`` takes a
mapping of parameter name -> tensor, so the same code serves training,
inference and gradient checking.
"""

from __future__ import annotations

import enum
import json
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeMismatch
from .ingest import UPPER_BODY_JOINTS, SkeletonSequence

__all__ = [
    "SkeletonGraph",
    "build_skeleton_graph",
    "ModelVariant",
    "ModelConfig",
    "TrainedModel",
    "build_model",
    "forward_mlp",
    "forward_rnn",
    "forward_stgcn",
    "predict",
    "predict_batch",
    "save_checkpoint",
    "load_checkpoint",
]


# -- skeleton graph ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    nodes: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    a_norm: np.ndarray

    @property
    def adjacency(self) -> np.ndarray:
        n = len(self.nodes)
        a = np.zeros((n, n))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def is_connected(self) -> bool:
        n = len(self.nodes)
        nbrs = [[] for _ in range(n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == n


def _anatomy_edges() -> list[tuple[str, str]]:
    edges = [
        ("nose", "left_eye"),
        ("nose", "right_eye"),
        ("nose", "left_shoulder"),
        ("left_shoulder", "right_shoulder"),
    ]
    for side in ("left", "right"):
        edges += [
            (f"{side}_shoulder", f"{side}_elbow"),
            (f"{side}_elbow", f"{side}_wrist"),
            (f"{side}_wrist", f"{side}_thumb_tip"),
        ]
        for finger in ("index", "middle", "ring", "pinky"):
            edges += [
                (f"{side}_wrist", f"{side}_{finger}_base_knuckle"),
                (f"{side}_{finger}_base_knuckle", f"{side}_{finger}_tip_knuckle"),
            ]
    return edges


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Row-normalized ``D^-1 (A + I)``."""
    a = adj + np.eye(adj.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def build_skeleton_graph(joint_names: Sequence[str] = UPPER_BODY_JOINTS) -> SkeletonGraph:
    pos = {n: i for i, n in enumerate(joint_names)}
    edges = tuple((pos[a], pos[b]) for a, b in _anatomy_edges())
    graph = SkeletonGraph(tuple(joint_names), edges, np.zeros((0, 0)))
    a_norm = normalize_adjacency(graph.adjacency)
    a_norm.setflags(write=False)
    return SkeletonGraph(tuple(joint_names), edges, a_norm)


# -- configuration -------------------------------------------------------------------


class ModelVariant(enum.Enum):
    BASELINE = "baseline"
    MLP = "mlp"
    RNN = "rnn"
    STGCN = "stgcn"


@dataclass(frozen=True)
class ModelConfig:
    variant: ModelVariant
    num_classes: int
    frames: int = 150
    joints: int = 27
    channels_in: int = 3
    # MLP and RNN
    layers: int = 1
    hidden_dim: int = 64
    dropout: float = 0.0
    cell: str = "gru"
    # STGCN; "block size" maps to channels per block, "window size" to temporal_kernel
    channels: tuple[int, ...] = (16, 32)
    strides: tuple[int, ...] = (2, 2)
    temporal_kernel: int = 9
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", ModelVariant(self.variant))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.cell not in ("gru", "lstm"):
            raise ValueError(f"cell must be 'gru' or 'lstm', got {self.cell!r}")
        if self.variant is ModelVariant.STGCN:
            if len(self.strides) != len(self.channels) or not self.channels:
                raise ValueError("STGCN needs one stride per block")
            if self.temporal_kernel % 2 != 1:
                raise ValueError("temporal_kernel must be odd")
            if self.groups != 1:
                raise ValueError("only groups=1 is supported")
        if self.variant is ModelVariant.RNN and self.layers < 1:
            raise ValueError("RNN needs at least one layer")

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        for key in ("channels", "strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    classes: tuple[str, ...]
    provenance: dict = field(default_factory=dict)
    majority: int | None = None  # baseline only

    def logits(self, x: np.ndarray) -> np.ndarray:
        if self.config.variant is ModelVariant.BASELINE:
            out = np.zeros((x.shape[0], self.config.num_classes))
            out[:, self.majority] = 1.0
            return out
        arch = build_model(self.config)
        return arch.forward(self.params, x).value


# -- architectures -------------------------------------------------------------------


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _check_input(cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    expected = (cfg.frames, cfg.joints, cfg.channels_in)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatch(f"expected input (B, {', '.join(map(str, expected))}), got {x.shape}")
    return x


class MLP:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.in_dim = cfg.frames * cfg.joints * cfg.channels_in

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        dim = self.in_dim
        for i in range(self.cfg.layers):
            params[f"hidden{i}.w"] = _he(rng, dim, (dim, self.cfg.hidden_dim))
            params[f"hidden{i}.b"] = np.zeros(self.cfg.hidden_dim)
            dim = self.cfg.hidden_dim
        params["out.w"] = rng.normal(0.0, np.sqrt(1.0 / dim), size=(dim, self.cfg.num_classes))
        params["out.b"] = np.zeros(self.cfg.num_classes)
        return params

    def forward(self, params, x, training=False, rng=None) -> Tensor:
        x = _check_input(self.cfg, x)
        h = Tensor(x.reshape(x.shape[0], -1))
        for i in range(self.cfg.layers):
            h = ad.relu(ad.linear(h, params[f"hidden{i}.w"], params[f"hidden{i}.b"]))
            h = ad.dropout(h, self.cfg.dropout, rng, training)
        return ad.linear(h, params["out.w"], params["out.b"])


class RNN:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.gates = 3 if cfg.cell == "gru" else 4

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        hs = self.cfg.hidden_dim
        bound = 1.0 / np.sqrt(hs)
        params = {}
        dim = self.cfg.joints * self.cfg.channels_in
        for i in range(self.cfg.layers):
            params[f"rnn{i}.w_ih"] = rng.uniform(-bound, bound, (dim, self.gates * hs))
            params[f"rnn{i}.w_hh"] = rng.uniform(-bound, bound, (hs, self.gates * hs))
            params[f"rnn{i}.b_ih"] = rng.uniform(-bound, bound, self.gates * hs)
            params[f"rnn{i}.b_hh"] = rng.uniform(-bound, bound, self.gates * hs)
            dim = hs
        params["out.w"] = rng.uniform(-bound, bound, (hs, self.cfg.num_classes))
        params["out.b"] = np.zeros(self.cfg.num_classes)
        return params

    def forward(self, params, x, training=False, rng=None) -> Tensor:
        x = _check_input(self.cfg, x)
        h = Tensor(x.reshape(x.shape[0], x.shape[1], -1))
        layer = ad.gru_layer if self.cfg.cell == "gru" else ad.lstm_layer
        for i in range(self.cfg.layers):
            if i > 0:
                h = ad.dropout(h, self.cfg.dropout, rng, training)
            h = layer(h, {k: params[f"rnn{i}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")})
        last = h[:, -1]
        last = ad.dropout(last, self.cfg.dropout, rng, training)
        return ad.linear(last, params["out.w"], params["out.b"])


class STGCN:
    """Stacked spatial graph conv -> ReLU -> depthwise temporal conv blocks.

    The first block has no residual branch; later blocks add the block input,
    projected by a linear map (and subsampled in time) when the channel count
    or the stride changes.
    """

    def __init__(self, cfg: ModelConfig, graph: SkeletonGraph | None = None):
        self.cfg = cfg
        self.graph = graph or build_skeleton_graph()
        if len(self.graph.nodes) != cfg.joints:
            raise ShapeMismatch(f"graph has {len(self.graph.nodes)} nodes, config {cfg.joints} joints")

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        cin = self.cfg.channels_in
        k = self.cfg.temporal_kernel
        for b, (cout, stride) in enumerate(zip(self.cfg.channels, self.cfg.strides)):
            params[f"block{b}.gcn.w"] = _he(rng, cin, (cin, cout))
            params[f"block{b}.gcn.b"] = np.zeros(cout)
            params[f"block{b}.tcn.k"] = rng.normal(0.0, np.sqrt(1.0 / k), size=(k, cout))
            params[f"block{b}.tcn.b"] = np.zeros(cout)
            if b > 0 and (cin != cout or stride != 1):
                params[f"block{b}.res.w"] = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, cout))
            cin = cout
        params["out.w"] = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, self.cfg.num_classes))
        params["out.b"] = np.zeros(self.cfg.num_classes)
        return params

    def frame_lengths(self) -> list[int]:
        lengths = [self.cfg.frames]
        pad = (self.cfg.temporal_kernel - 1) // 2
        for stride in self.cfg.strides:
            lengths.append(ad.conv_length(lengths[-1], self.cfg.temporal_kernel, stride, pad))
        return lengths

    def forward(self, params, x, training=False, rng=None, graph: SkeletonGraph | None = None) -> Tensor:
        x = _check_input(self.cfg, x)
        a_norm = (graph or self.graph).a_norm
        pad = (self.cfg.temporal_kernel - 1) // 2
        h = Tensor(x)  # (B, T, J, C)
        for b, stride in enumerate(self.cfg.strides):
            y = ad.relu(ad.add(ad.graph_conv(h, a_norm, params[f"block{b}.gcn.w"]),
                               params[f"block{b}.gcn.b"]))
            y = ad.temporal_conv(y, params[f"block{b}.tcn.k"], stride=stride, padding=pad, axis=1)
            y = ad.add(y, params[f"block{b}.tcn.b"])
            if b > 0:
                res = h[:, ::stride] if stride != 1 else h
                if f"block{b}.res.w" in params:
                    res = ad.linear(res, params[f"block{b}.res.w"])
                y = ad.add(y, res)
            h = ad.dropout(y, self.cfg.dropout, rng, training)
        pooled = ad.mean(h, axis=(1, 2))
        return ad.linear(pooled, params["out.w"], params["out.b"])


def build_model(cfg: ModelConfig, graph: SkeletonGraph | None = None):
    if cfg.variant is ModelVariant.MLP:
        return MLP(cfg)
    if cfg.variant is ModelVariant.RNN:
        return RNN(cfg)
    if cfg.variant is ModelVariant.STGCN:
        return STGCN(cfg, graph)
    raise ValueError(f"{cfg.variant.value} has no trainable architecture")


def _seq_array(seq) -> np.ndarray:
    return seq.data if isinstance(seq, SkeletonSequence) else np.asarray(seq, dtype=np.float64)


def _forward_one(model: TrainedModel, seq, variant: ModelVariant, **kw) -> np.ndarray:
    if model.config.variant is not variant:
        raise ValueError(f"model is {model.config.variant.value}, not {variant.value}")
    arch = build_model(model.config, kw.pop("graph", None))
    return arch.forward(model.params, _seq_array(seq)[None], **kw).value[0]


def forward_mlp(seq, model: TrainedModel) -> np.ndarray:
    return _forward_one(model, seq, ModelVariant.MLP)


def forward_rnn(seq, model: TrainedModel) -> np.ndarray:
    return _forward_one(model, seq, ModelVariant.RNN)


def forward_stgcn(seq, model: TrainedModel, graph: SkeletonGraph | None = None) -> np.ndarray:
    return _forward_one(model, seq, ModelVariant.STGCN, graph=graph)


def predict_batch(model: TrainedModel, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if model.config.variant is ModelVariant.BASELINE:
        return np.full(x.shape[0], model.majority, dtype=np.int64)
    out = [np.argmax(model.logits(x[i:i + batch_size]), axis=1)
           for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out).astype(np.int64) if out else np.zeros(0, dtype=np.int64)


def predict(model: TrainedModel, seq) -> int:
    """Argmax class index; the lowest index wins ties. Baselines ignore ``seq``."""
    if model.config.variant is ModelVariant.BASELINE:
        return int(model.majority)
    return int(np.argmax(model.logits(_seq_array(seq)[None])[0]))


# -- checkpoints ---------------------------------------------------------------------
#
# Layout:
#   8 bytes   magic b"PHNRCKPT"
#   8 bytes   little-endian uint64 header length L
#   L bytes   UTF-8 JSON header: {"format", "config", "classes", "majority",
#             "provenance", "params": [{"name", "shape", "offset", "count"}]}
#   rest      parameter blobs, little-endian float64, offsets in bytes from
#             the start of this section, in header order

CKPT_MAGIC = b"PHNRCKPT"
CKPT_FORMAT = "phonorec.checkpoint/1"


def checkpoint_bytes(model: TrainedModel) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": CKPT_FORMAT,
        "config": model.config.to_json(),
        "classes": list(model.classes),
        "majority": model.majority,
        "provenance": model.provenance,
        "params": entries,
    }
    hb = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def save_checkpoint(model: TrainedModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format") != CKPT_FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    body = raw[16 + hlen:]
    params = {}
    for e in header["params"]:
        end = e["offset"] + 8 * e["count"]
        if end > len(body):
            raise FormatError(f"{path}: truncated parameter {e['name']!r}")
        arr = np.frombuffer(body[e["offset"]:end], dtype="<f8").astype(np.float64)
        params[e["name"]] = arr.reshape(e["shape"])
    return TrainedModel(ModelConfig.from_json(header["config"]), params,
                        tuple(header["classes"]), header["provenance"], header["majority"])
