"""Command-line entry point.

Output layout (every ``--out`` is a directory)::

    build    dataset.json  sequences.npy  join_report.json
    split    manifest.json
    train    model.ckpt  history.jsonl  experiment.json
    search   trials.jsonl  best_config.json
    eval     report.json
    analyze  agreement.json
    report   table.txt | table.csv
    fixture  lexicon.csv  index.csv  keypoints/

Each output directory also gets ``run.log`` (timestamped, append-only) and a
``.lock`` file guarding concurrent writers. Everything else is a pure function
of the inputs and the seed.

Experiment config (JSON, every key optional; command-line flags win)::

    {"property": "sign_type", "tracker": "mocap3d", "mode": "phoneme",
     "ratios": [0.7, 0.15, 0.15], "seed": 0,
     "paths": {"lexicon": ..., "index": ..., "keypoints": ..., "dataset": ...,
               "manifest": ...},
     "model": {ModelConfig fields}, "train": {TrainConfig fields},
     "search": {"params": {name: [candidates]}, "budget": 10}}

Relative input paths resolve against ``$PHONOREC_DATA_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .errors import ConfigError, PhonorecError
from .evaluation import EvalReport, agreement, cross_task_misclassification, render_table
from .ingest import DEFAULT_FRAMES, TrackerKind, build_dataset, load_dataset, save_dataset
from .models import ModelConfig, load_checkpoint, predict_batch, save_checkpoint
from .phonology import PropertyKind
from .splits import SplitManifest, SplitMode, SplitSpec, format_split_table, make_split, verify_split
from .synthetic import write_fixture
from .train import SearchSpace, TrainConfig, final_fit, search, train

DATA_ROOT_ENV = "PHONOREC_DATA_ROOT"


@dataclass
class ExperimentConfig:
    property: PropertyKind | None = None
    tracker: TrackerKind = TrackerKind.MOCAP3D
    mode: SplitMode = SplitMode.PHONEME
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    paths: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"property", "tracker", "mode", "ratios", "seed", "paths", "model",
                            "train", "search"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls()
        try:
            if d.get("property") is not None:
                cfg.property = PropertyKind.parse(d["property"])
            if "tracker" in d:
                cfg.tracker = TrackerKind(d["tracker"])
            if "mode" in d:
                cfg.mode = SplitMode(d["mode"])
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if "ratios" in d:
            cfg.ratios = tuple(float(r) for r in d["ratios"])
        cfg.seed = int(d.get("seed", 0))
        for key in ("paths", "model", "train", "search"):
            if not isinstance(d.get(key, {}), dict):
                raise ConfigError(f"{key!r} must be an object")
            setattr(cfg, key, dict(d.get(key, {})))
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err.msg} at line {err.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_json(doc)

    def model_config(self) -> ModelConfig:
        d = dict(self.model)
        d.setdefault("variant", "mlp")
        d.setdefault("num_classes", 1)  # replaced by the training-split class count
        try:
            return ModelConfig.from_json(d)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"model config: {err}") from None

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        try:
            return TrainConfig.from_json(d)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"train config: {err}") from None


# -- helpers ---------------------------------------------------------------------------


def _resolve(path) -> Path:
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute() and not p.exists():
        return Path(root) / p
    return p


def _input(args, cfg: ExperimentConfig, name: str) -> Path:
    value = getattr(args, name, None) or cfg.paths.get(name)
    if value is None:
        raise ConfigError(f"no {name} given (use --{name} or paths.{name} in the config)")
    path = _resolve(value)
    if not path.exists():
        raise ConfigError(f"{name} not found: {path}")
    return path


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(_resolve(args.config)) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "property", None):
        cfg.property = args.property
    if getattr(args, "tracker", None):
        cfg.tracker = args.tracker
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "ratios", None):
        cfg.ratios = args.ratios
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train["seed"] = args.seed
    return cfg


class _Output:
    """Locked output directory with a timestamped sidecar log."""

    def __init__(self, path, command: str):
        self.dir = Path(path)
        self.command = command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.dir / ".lock"))

    def __enter__(self):
        self.lock.acquire()
        self.log(f"start {self.command}")
        return self

    def __exit__(self, exc_type, exc, tb):
        self.log(f"end {self.command}" + (f" ({exc_type.__name__})" if exc_type else ""))
        self.lock.release()
        return False

    def log(self, msg: str) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        with open(self.dir / "run.log", "a", encoding="utf-8") as fh:
            fh.write(f"{stamp} {msg}\n")

    def write_json(self, name: str, doc) -> Path:
        path = self.dir / name
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                        encoding="utf-8")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        return path


def _need_property(cfg: ExperimentConfig, manifest: SplitManifest | None = None) -> PropertyKind:
    if manifest is not None:
        if cfg.property is not None and cfg.property is not manifest.spec.kind:
            raise ConfigError(f"--property {cfg.property.value} but the manifest splits on "
                              f"{manifest.spec.kind.value}")
        return manifest.spec.kind
    if cfg.property is None:
        raise ConfigError("no property given (use --property or 'property' in the config)")
    return cfg.property


# -- commands --------------------------------------------------------------------------


def cmd_build(args) -> int:
    cfg = _experiment(args)
    lexicon = _input(args, cfg, "lexicon")
    index = _input(args, cfg, "index")
    keypoints = _input(args, cfg, "keypoints")
    with _Output(args.out, "build") as out:
        records, report = build_dataset(lexicon, index, keypoints, args.frames,
                                        not args.no_normalize_coords)
        if not records:
            raise ConfigError("no video matched a lexicon gloss")
        save_dataset(records, out.dir)
        out.write_json("join_report.json", report.to_json())
    print(f"matched glosses: {report.matched_glosses}")
    print(f"matched videos: {report.matched_videos}")
    print(f"records written: {len(records)}")
    return 0


def cmd_split(args) -> int:
    cfg = _experiment(args)
    kind = _need_property(cfg)
    try:
        spec = SplitSpec(kind, cfg.mode, cfg.ratios, cfg.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    records = load_dataset(_input(args, cfg, "dataset"))
    with _Output(args.out, "split") as out:
        manifest = make_split(records, spec)
        out.write_text("manifest.json", manifest.dumps())
    report = verify_split(manifest, records)
    print(format_split_table(report), end="")
    if not report.ok:
        for v in report.violations:
            print(f"warning: {v.rule}: {v.detail}", file=sys.stderr)
    return 0


def _load_split(args, cfg):
    records = load_dataset(_input(args, cfg, "dataset"))
    manifest = SplitManifest.load(_input(args, cfg, "manifest"))
    _need_property(cfg, manifest)
    return records, manifest


def cmd_train(args) -> int:
    cfg = _experiment(args)
    records, manifest = _load_split(args, cfg)
    mc, tc = cfg.model_config(), cfg.train_config()
    with _Output(args.out, "train") as out:
        model, history = train(records, manifest, mc, tc)
        out.log(f"best epoch {history.best_epoch}")
        if args.final_fit:
            model = final_fit(records, manifest, mc, tc, history)
        save_checkpoint(model, out.dir / "model.ckpt")
        history.save(out.dir / "history.jsonl")
        out.write_json("experiment.json", {"model": mc.to_json(), "train": tc.to_json(),
                                           "final_fit": bool(args.final_fit)})
    best = history.epochs[history.best_epoch]
    print(f"best epoch: {history.best_epoch}  val MCC: {best.val_mcc:.4f}  "
          f"val accuracy: {best.val_accuracy:.4f}")
    return 0


def cmd_search(args) -> int:
    cfg = _experiment(args)
    records, manifest = _load_split(args, cfg)
    if not cfg.search:
        raise ConfigError("search needs a 'search' section in the config")
    try:
        space = SearchSpace.from_json(cfg.search)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"search space: {err}") from None
    if args.budget is not None:
        space.budget = args.budget
    with _Output(args.out, "search") as out:
        log = out.dir / "trials.jsonl"
        log.write_text("", encoding="utf-8")
        best, trials = search(records, manifest, space, cfg.seed, cfg.model_config(),
                              cfg.train_config(), log_path=log)
        doc = {"best": None if best is None else {"model": best[0].to_json(),
                                                  "train": best[1].to_json()},
               "trials": len(trials),
               "aborted": sum(t["status"] == "aborted" for t in trials)}
        out.write_json("best_config.json", doc)
    print(f"trials: {doc['trials']}  aborted: {doc['aborted']}")
    if best is None:
        print("error: NonFiniteLoss: every trial aborted", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    records, manifest = _load_split(args, cfg)
    model = load_checkpoint(_input(args, cfg, "model"))
    kind = manifest.spec.kind
    by_id = {r.video_id: r for r in records}
    recs = [by_id[v] for v in manifest.ids(args.split)]
    x = np.stack([r.sequence.data for r in recs])
    pred = predict_batch(model, x)
    rows = [(r.video_id, r.label[kind], model.classes[p]) for r, p in zip(recs, pred)]
    name = args.name or model.config.variant.value
    tracker = recs[0].sequence.tracker.value if recs else ""
    report = EvalReport.build(kind, manifest.spec.mode.value, name, rows, model.classes, tracker)
    with _Output(args.out, "eval") as out:
        report.save(out.dir / "report.json")
    m = report.metrics
    print(f"{kind.value} {report.mode} {name}: A={100 * m.accuracy:.1f} ± {100 * report.ci:.1f} "
          f"Abar={100 * m.balanced_accuracy:.1f} MCC={m.mcc:.4f}")
    return 0


def cmd_analyze(args) -> int:
    reports = [EvalReport.load(_resolve(p)) for p in args.reports]
    if len(reports) < 2:
        raise ConfigError("analyze needs at least two reports")
    by_kind: dict[PropertyKind, list[EvalReport]] = {}
    for r in reports:
        by_kind.setdefault(r.property, []).append(r)
    doc = {"properties": {}}
    joint, tests = {}, {}
    for kind, group in by_kind.items():
        tests[kind.value] = group[0].ids()
        if len(group) < 2:
            continue
        ag = agreement(group)
        doc["properties"][kind.value] = {**ag.to_json(), "models": [r.model for r in group]}
        joint[kind.value] = set(ag.ids)
        kappa = "undefined" if ag.kappa is None else f"{ag.kappa:.4f}"
        print(f"{kind.value}: {len(ag.ids)} jointly misclassified, kappa {kappa}")
    if len(tests) >= 2:
        rates = cross_task_misclassification(joint, tests)
        doc["cross_task"] = {str(m): r.to_json() for m, r in rates.items()}
    with _Output(args.out, "analyze") as out:
        out.write_json("agreement.json", doc)
    return 0


def cmd_report(args) -> int:
    reports = [EvalReport.load(_resolve(p)) for p in args.reports]
    table = render_table(reports, args.format)
    with _Output(args.out, "report") as out:
        out.write_text(f"table.{'csv' if args.format == 'csv' else 'txt'}", table)
    print(table, end="")
    return 0


def cmd_fixture(args) -> int:
    with _Output(args.out, "fixture") as out:
        write_fixture(out.dir, args.videos_per_gloss, args.frames, args.seed or 0)
    print(f"fixture written to {args.out}")
    return 0


# -- parser ----------------------------------------------------------------------------


def _ratios(text: str) -> tuple[float, float, float]:
    parts = text.replace(":", ",").split(",")
    try:
        values = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ratios {text!r}") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError("ratios need three values (train,val,test)")
    if any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-12:
        raise argparse.ArgumentTypeError(f"ratios must be non-negative and sum to 1, got {text!r}")
    return values


def _property(text: str) -> PropertyKind:
    try:
        return PropertyKind.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown property {text!r}; choose from {', '.join(k.value for k in PropertyKind)}"
        ) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phonorec",
                                description="Phonological property recognition from skeletons.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--property", type=_property)
        sp.add_argument("--tracker", type=TrackerKind, choices=list(TrackerKind),
                        metavar="{" + ",".join(t.value for t in TrackerKind) + "}")
        sp.add_argument("--mode", type=SplitMode, choices=list(SplitMode),
                        metavar="{" + ",".join(m.value for m in SplitMode) + "}")
        sp.add_argument("--ratios", type=_ratios, help="train,val,test (default 0.7,0.15,0.15)")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("build", help="join lexicon and index, prepare keypoints")
    common(sp)
    sp.add_argument("--lexicon")
    sp.add_argument("--index")
    sp.add_argument("--keypoints", help="root that keypoint paths are relative to")
    sp.add_argument("--frames", type=int, default=DEFAULT_FRAMES)
    sp.add_argument("--no-normalize-coords", action="store_true",
                    help="keep raw tracker coordinates")
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("split", help="write a stratified split manifest")
    common(sp)
    sp.add_argument("--dataset")
    sp.set_defaults(func=cmd_split)

    for name, func, text in (("train", cmd_train, "train one model"),
                             ("search", cmd_search, "random hyperparameter search")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--dataset")
        sp.add_argument("--manifest")
        if name == "train":
            sp.add_argument("--final-fit", action="store_true",
                            help="refit on train+val for best_epoch+1 epochs")
        else:
            sp.add_argument("--budget", type=int)
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--manifest")
    sp.add_argument("--model", help="checkpoint file")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--name", help="model name recorded in the report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="joint misclassification and agreement")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("report", help="accuracy table from eval reports")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--format", choices=("text", "csv"), default="text")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("fixture", help="write a tiny lexicon/index/keypoint fixture")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--videos-per-gloss", type=int, default=2)
    sp.add_argument("--frames", type=int, default=40)
    sp.set_defaults(func=cmd_fixture)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PhonorecError, OSError, ValueError, KeyError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"error: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
