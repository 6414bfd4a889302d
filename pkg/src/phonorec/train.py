"""Training loop, model selection, refit, hyperparameter search and seed study."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import EmptySplit, NonFiniteError, NonFiniteLoss
from .evaluation import ConfusionMatrix, multiclass_mcc, order_codes
from .models import ModelConfig, ModelVariant, TrainedModel, build_model, predict_batch
from .phonology import PropertyKind, majority_value
from .splits import SplitManifest, dataset_hash

CLASS_WEIGHTING = ("none", "inverse-frequency")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    scheduler_step_size: int = 10
    gamma: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    # overrides the model's dropout when set
    dropout: float | None = None
    class_weighting: str = "none"
    seed: int = 0
    warmup_epochs: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.scheduler_step_size < 1:
            raise ValueError("scheduler_step_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.class_weighting not in CLASS_WEIGHTING:
            raise ValueError(f"class_weighting must be one of {CLASS_WEIGHTING}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based)."""
        lr = self.learning_rate * self.gamma ** (epoch // self.scheduler_step_size)
        if self.warmup_epochs:
            lr *= min(1.0, (epoch + 1) / self.warmup_epochs)
        return lr

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_mcc: float | None = None
    val_accuracy: float | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    def select_best(self) -> int:
        """Argmax of validation MCC, earliest on ties; last epoch without validation."""
        scored = [(e.val_mcc, -e.epoch) for e in self.epochs if e.val_mcc is not None]
        if not scored:
            return len(self.epochs) - 1
        return -max(scored)[1]

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.epochs]

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(e), sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"best_epoch": self.best_epoch}))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        h = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if "best_epoch" in d and "epoch" not in d:
                h.best_epoch = d["best_epoch"]
            else:
                h.epochs.append(EpochStats(**d))
        return h


class Adam:
    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def inverse_frequency_weights(y: np.ndarray, k: int) -> np.ndarray:
    """N / (K * n_c); classes absent from ``y`` get weight 0."""
    counts = np.bincount(y, minlength=k).astype(np.float64)
    w = np.zeros(k)
    nz = counts > 0
    w[nz] = len(y) / (nz.sum() * counts[nz])
    return w


# -- data plumbing -------------------------------------------------------------------


def _subset(records: Sequence, ids: Sequence[str], what: str) -> list:
    by_id = {r.video_id: r for r in records}
    missing = [v for v in ids if v not in by_id]
    if missing:
        raise KeyError(f"{what} ids not in the dataset: {', '.join(missing[:5])}")
    return [by_id[v] for v in ids]


def _arrays(records: Sequence, kind: PropertyKind, classes: Sequence[str]):
    pos = {c: i for i, c in enumerate(classes)}
    x = np.stack([r.sequence.data for r in records]) if records else None
    # -1 marks a class the model has never seen, always counted wrong
    y = np.array([pos.get(r.label[kind], -1) for r in records], dtype=np.int64)
    return x, y


def _score(model: TrainedModel, x, y) -> tuple[float, float]:
    pred = predict_batch(model, x)
    k = len(model.classes)
    labels = [str(v) for v in range(-1, k)]
    cm = ConfusionMatrix.from_labels([str(v) for v in y], [str(v) for v in pred], classes=labels)
    return float(np.mean(pred == y)), multiclass_mcc(cm.counts)


def _config_for(model_config: ModelConfig, train_config: TrainConfig, k: int) -> ModelConfig:
    cfg = replace(model_config, num_classes=k)
    if train_config.dropout is not None and cfg.variant is not ModelVariant.BASELINE:
        cfg = replace(cfg, dropout=train_config.dropout)
    return cfg


def fit(records: Sequence, kind: PropertyKind, fit_ids: Sequence[str],
        val_ids: Sequence[str] | None, model_config: ModelConfig, train_config: TrainConfig,
        epochs: int | None = None, on_batch: Callable[[list[str]], None] | None = None,
        provenance: Mapping | None = None) -> tuple[TrainedModel, TrainHistory]:
    """Train on ``fit_ids``; with ``val_ids`` restore the best-validation-MCC epoch."""
    if not fit_ids:
        raise EmptySplit("training split is empty")
    if val_ids is not None and not val_ids:
        raise EmptySplit("validation split is empty")
    fit_recs = _subset(records, fit_ids, "training")
    classes = order_codes(kind, [r.label[kind] for r in fit_recs])
    cfg = _config_for(model_config, train_config, len(classes))
    prov = {"seed": train_config.seed, "fit_size": len(fit_recs),
            "dataset_hash": dataset_hash(records), **(provenance or {})}
    x, y = _arrays(fit_recs, kind, classes)
    if val_ids is not None:
        xv, yv = _arrays(_subset(records, val_ids, "validation"), kind, classes)
    history = TrainHistory()

    if cfg.variant is ModelVariant.BASELINE:
        major = majority_value(kind, [r.label for r in fit_recs])
        model = TrainedModel(cfg, {}, classes, {**prov, "epochs": 0}, classes.index(major))
        acc, _ = _score(model, x, y)
        stats = EpochStats(0, 0.0, 0.0, acc)
        if val_ids is not None:
            stats.val_accuracy, stats.val_mcc = _score(model, xv, yv)
        history.epochs.append(stats)
        return model, history

    n_epochs = train_config.epochs if epochs is None else epochs
    if n_epochs < 1:
        raise ValueError("need at least one epoch")
    seeds = np.random.SeedSequence(train_config.seed).spawn(3)
    init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    arch = build_model(cfg)
    params = arch.init(init_rng)
    opt = Adam(params, train_config.betas, train_config.eps)
    weights = (inverse_frequency_weights(y, len(classes))
               if train_config.class_weighting == "inverse-frequency" else None)
    ids = [r.video_id for r in fit_recs]
    best_params = None
    best_key = None
    bs = train_config.batch_size

    for epoch in range(n_epochs):
        lr = train_config.lr_at(epoch)
        perm = order_rng.permutation(len(ids))
        total_loss = 0.0
        for b, start in enumerate(range(0, len(ids), bs)):
            idx = perm[start:start + bs]
            if on_batch is not None:
                on_batch([ids[i] for i in idx])
            leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            try:
                with ad.Tape() as tape:
                    logits = arch.forward(leaves, x[idx], training=True, rng=drop_rng)
                    loss, _ = ad.softmax_cross_entropy(logits, y[idx], weights)
                tape.backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteLoss(epoch, b, str(exc)) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, b, f"loss is {value}")
            grads = {k: t.grad if t.grad is not None else np.zeros_like(params[k])
                     for k, t in leaves.items()}
            opt.step(params, grads, lr)
            bad = [k for k, v in params.items() if not np.isfinite(v).all()]
            if bad:
                raise NonFiniteLoss(epoch, b, f"parameter {bad[0]} became non-finite")
            total_loss += value * len(idx)
        snapshot = TrainedModel(cfg, params, classes, prov)
        try:
            train_acc, _ = _score(snapshot, x, y)
            stats = EpochStats(epoch, lr, total_loss / len(ids), train_acc)
            if val_ids is not None:
                stats.val_accuracy, stats.val_mcc = _score(snapshot, xv, yv)
        except NonFiniteError as exc:
            raise NonFiniteLoss(epoch, -1, f"evaluation: {exc}") from exc
        history.epochs.append(stats)
        if val_ids is not None:
            key = stats.val_mcc
            if best_key is None or key > best_key:
                best_key = key
                best_params = {k: v.copy() for k, v in params.items()}

    history.best_epoch = history.select_best()
    final = best_params if best_params is not None else params
    prov = {**prov, "epochs": n_epochs, "best_epoch": history.best_epoch}
    return TrainedModel(cfg, final, classes, prov), history


def train(records: Sequence, manifest: SplitManifest, model_config: ModelConfig,
          train_config: TrainConfig, on_batch=None) -> tuple[TrainedModel, TrainHistory]:
    """Fit on the training split, selecting the epoch with the best validation MCC."""
    return fit(records, manifest.spec.kind, manifest.train, manifest.val, model_config,
               train_config, on_batch=on_batch,
               provenance={"split_hash": manifest.dataset_hash, "stage": "train"})


def final_fit(records: Sequence, manifest: SplitManifest, model_config: ModelConfig,
              train_config: TrainConfig, epochs_from_history: TrainHistory | int,
              on_batch=None) -> TrainedModel:
    """Retrain from scratch on train and validation together; the test split is never read.

    The epoch budget is best_epoch + 1 of the supplied history (or the given int).
    """
    if isinstance(epochs_from_history, TrainHistory):
        epochs = epochs_from_history.best_epoch + 1
    else:
        epochs = int(epochs_from_history)
    ids = tuple(manifest.train) + tuple(manifest.val)
    model, _ = fit(records, manifest.spec.kind, ids, None, model_config, train_config,
                   epochs=epochs, on_batch=on_batch,
                   provenance={"split_hash": manifest.dataset_hash, "stage": "final_fit"})
    return model


def split_accuracy(model: TrainedModel, records: Sequence, manifest: SplitManifest) -> float:
    recs = _subset(records, manifest.test, "test")
    x, y = _arrays(recs, manifest.spec.kind, model.classes)
    return float(np.mean(predict_batch(model, x) == y))


# -- search --------------------------------------------------------------------------

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"variant", "num_classes"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class SearchSpace:
    """Finite candidate sets keyed by ModelConfig or TrainConfig field name."""

    params: dict[str, list]
    budget: int = 10

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        for name, values in self.params.items():
            if name not in MODEL_KEYS | TRAIN_KEYS:
                raise ValueError(f"unknown hyperparameter {name!r}")
            if not values:
                raise ValueError(f"candidate set for {name!r} is empty")

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.params.values())

    def config(self, index: int) -> dict:
        """Mixed-radix decode of ``index`` over the keys in sorted order."""
        out = {}
        for name in sorted(self.params):
            values = self.params[name]
            index, digit = divmod(index, len(values))
            out[name] = values[digit]
        return out

    def sample(self, seed: int) -> list[dict]:
        n = min(self.budget, self.size)
        picks = np.random.default_rng(seed).choice(self.size, size=n, replace=False)
        return [self.config(int(i)) for i in picks]

    def to_json(self) -> dict:
        return {"params": self.params, "budget": self.budget}

    @classmethod
    def from_json(cls, d: Mapping) -> "SearchSpace":
        return cls({k: list(v) for k, v in d["params"].items()}, int(d.get("budget", 10)))


def apply_overrides(model_config: ModelConfig, train_config: TrainConfig, overrides: Mapping):
    m = {k: (tuple(v) if isinstance(v, list) else v) for k, v in overrides.items() if k in MODEL_KEYS}
    t = {k: v for k, v in overrides.items() if k in TRAIN_KEYS}
    return replace(model_config, **m), replace(train_config, **t)


def search(records: Sequence, manifest: SplitManifest, space: SearchSpace, seed: int,
           model_config: ModelConfig, train_config: TrainConfig, log_path=None):
    """Seeded random search maximising validation MCC.

    Returns ``(best, trials)`` where ``best`` is ``(model_config, train_config)``
    of the winning trial (``None`` if every trial aborted) and ``trials`` holds
    one dict per sampled configuration.
    """
    trials = []
    best, best_mcc = None, None
    for i, overrides in enumerate(space.sample(seed)):
        mc, tc = apply_overrides(model_config, train_config, overrides)
        entry = {"trial": i, "params": overrides, "status": "ok"}
        try:
            model, hist = train(records, manifest, mc, tc)
        except NonFiniteLoss as exc:
            entry.update(status="aborted", error=str(exc))
        else:
            stats = hist.epochs[hist.best_epoch]
            entry.update(best_epoch=hist.best_epoch, val_mcc=stats.val_mcc,
                         val_accuracy=stats.val_accuracy)
            if best_mcc is None or stats.val_mcc > best_mcc:
                best_mcc = stats.val_mcc
                best = (mc, tc)
        trials.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return best, trials


# -- seed study ------------------------------------------------------------------------


@dataclass
class SeedStudy:
    seeds: list[int]
    accuracies: list[float]  # percent

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def std(self) -> float:
        return statistics.stdev(self.accuracies)

    def formatted(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "accuracies": self.accuracies, "mean": self.mean,
                "std": self.std, "formatted": self.formatted()}


def seed_study(records: Sequence, manifest: SplitManifest, model_config: ModelConfig,
               train_config: TrainConfig, n_seeds: int = 5) -> SeedStudy:
    """Test accuracy (percent) of ``n_seeds`` runs that differ only in seed."""
    if n_seeds < 2:
        raise ValueError("a seed study needs at least two seeds")
    seeds = [train_config.seed + i for i in range(n_seeds)]
    accs = []
    for s in seeds:
        model, _ = train(records, manifest, model_config, replace(train_config, seed=s))
        accs.append(100.0 * split_accuracy(model, records, manifest))
    return SeedStudy(seeds, accs)

