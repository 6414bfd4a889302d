"""Acceptance criteria 1-9, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line (also repeated in
the pytest terminal summary) and then asserts the criterion at its stated
tolerance. Run on its own with::

    pytest -v tests/test_acceptance.py
"""

import itertools
import json
import math
import re
import subprocess
import sys
import time
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np

import conftest
from oracles import binary_mcc as oracle_binary_mcc
from oracles import brute_metrics
from phonorec import autodiff as ad
from phonorec.evaluation import (
    ConfusionMatrix,
    EvalReport,
    Metrics,
    accuracy_ci,
    fleiss_kappa,
    joint_misclassified,
    metrics,
    multiclass_mcc,
)
from phonorec.ingest import SignRecord
from phonorec.models import ModelConfig, build_model
from phonorec.phonology import TOTAL_VIDEOS, PhonologicalLabel, PropertyKind, builtin_taxonomy
from phonorec.splits import SplitMode, SplitSpec, make_split, verify_split
from phonorec.synthetic import separable_dataset
from phonorec.train import TrainConfig, fit, seed_study, split_accuracy, train
from test_autodiff import OP_NAMES, _ops


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- 1. baseline reproduction ---------------------------------------------------------

PUBLISHED_A = {
    PropertyKind.FLEXION: 50.3, PropertyKind.MAJOR_LOCATION: 34.4,
    PropertyKind.MINOR_LOCATION: 33.9, PropertyKind.MOVEMENT: 35.5,
    PropertyKind.SELECTED_FINGERS: 48.2, PropertyKind.SIGN_TYPE: 39.3,
}
PUBLISHED_ABAR = {
    PropertyKind.FLEXION: 11.1, PropertyKind.MAJOR_LOCATION: 20.0,
    PropertyKind.MOVEMENT: 16.7, PropertyKind.SELECTED_FINGERS: 11.1,
    PropertyKind.SIGN_TYPE: 20.0,
}


def test_criterion_1_baseline_reproduction():
    start = time.perf_counter()
    tax = builtin_taxonomy()
    problems, cells = [], []
    for kind in PropertyKind:
        true = tax.expand(kind)
        top = max(tax.values(kind), key=lambda v: v.cardinality)
        # accuracy over the 10017-video dataset
        acc = 100 * top.cardinality / TOTAL_VIDEOS
        # balanced accuracy of the constant predictor on the expanded distribution
        m = metrics(ConfusionMatrix.from_labels(true, [top.code] * len(true), kind=kind))
        abar = 100 * m.balanced_accuracy
        cells.append(f"{kind.value}={acc:.1f}/{abar:.1f}")
        if abs(acc - PUBLISHED_A[kind]) > 0.1:
            problems.append(f"{kind.value} A {acc:.2f}")
        expect = PUBLISHED_ABAR.get(kind, 100 / 30)
        if abs(abar - expect) > 0.05:
            problems.append(f"{kind.value} Abar {abar:.2f}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 1.0
    verdict(1, ok, f"A/Abar {' '.join(cells)} ({elapsed:.2f}s)"
            + (f" mismatches: {problems}" if problems else ""))


# -- 2. confidence interval -------------------------------------------------------------


def test_criterion_2_confidence_interval():
    half = accuracy_ci(0.845, 1503, 0.05)
    verdict(2, 0.017 <= half <= 0.019, f"accuracy_ci(0.845, 1503) = {half:.5f}")


# -- 3. gradient correctness ----------------------------------------------------------------

E2E_CASES = [
    ("mlp", 2, {"hidden_dim": 3, "layers": 2}),
    ("rnn-gru", 2, {"variant": "rnn", "hidden_dim": 3, "cell": "gru", "layers": 2}),
    ("rnn-lstm", 2, {"variant": "rnn", "hidden_dim": 3, "cell": "lstm"}),
    ("stgcn", 27, {"channels": (2, 3), "strides": (1, 2), "temporal_kernel": 3}),
]


def end_to_end_worst(name, joints, extra, instances=10):
    extra = dict(extra)
    variant = extra.pop("variant", name)
    arch = build_model(ModelConfig(variant, num_classes=3, frames=4, joints=joints, channels_in=3, **extra))
    worst = 0.0
    for trial in range(instances):
        rng = np.random.default_rng(100 + trial)
        # jitter off the zero-bias init so no relu input sits exactly on its kink
        params = {k: v + rng.normal(scale=0.1, size=v.shape) for k, v in arch.init(rng).items()}
        names = sorted(params)
        x = rng.normal(size=(2, 4, joints, 3))
        y = rng.integers(0, 3, 2)

        def loss(*leaves):
            return ad.softmax_cross_entropy(arch.forward(dict(zip(names, leaves)), x), y)[0]

        worst = max(worst, ad.gradcheck(loss, [params[n] for n in names]))
    return worst


def test_criterion_3_gradient_correctness():
    start = time.perf_counter()
    worst = {}
    for name in OP_NAMES:
        w = 0.0
        for trial in range(10):
            _, f, inputs = next(o for o in _ops(np.random.default_rng(1000 + trial)) if o[0] == name)
            w = max(w, ad.gradcheck(f, inputs))
        worst[name] = w
    for name, joints, extra in E2E_CASES:
        worst[f"model:{name}"] = end_to_end_worst(name, joints, extra)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    failing = [k for k, v in worst.items() if not v < 1e-4]
    ok = not failing and elapsed < 30.0
    verdict(3, ok, f"{len(OP_NAMES)} ops + {len(E2E_CASES)} models x 10 instances, "
            f"max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s"
            + (f" failing: {failing}" if failing else ""))


# -- 4. learnability ----------------------------------------------------------------------

KIND4 = PropertyKind.MOVEMENT


def test_criterion_4_learnability():
    start = time.perf_counter()
    recs = separable_dataset(n_per_class=50, kind=KIND4, n_classes=6, frames=150, seed=0)
    assert len(recs) == 300 and recs[0].sequence.data.shape == (150, 27, 3)
    man = make_split(recs, SplitSpec(KIND4, SplitMode.PHONEME, seed=1))
    by_id = {r.video_id: r for r in recs}
    train_recs = [by_id[v] for v in man.train]
    x_train = np.stack([r.sequence.data for r in train_recs])

    def train_acc(model):
        pred = [model.classes[i] for i in np.argmax(model.logits(x_train), axis=1)]
        return float(np.mean([p == r.label[KIND4] for p, r in zip(pred, train_recs)]))

    mlp, _ = fit(recs, KIND4, man.train, None, ModelConfig("mlp", num_classes=1, hidden_dim=32),
                 TrainConfig(learning_rate=3e-4, epochs=30, seed=0))
    rnn, _ = fit(recs, KIND4, man.train, None,
                 ModelConfig("rnn", num_classes=1, hidden_dim=16, cell="gru"),
                 TrainConfig(learning_rate=1e-2, epochs=10, seed=0))
    stgcn, _ = train(recs, man, ModelConfig("stgcn", num_classes=1, channels=(8, 16), strides=(1, 2)),
                     TrainConfig(learning_rate=1e-2, epochs=10, seed=0))
    a_mlp, a_rnn = train_acc(mlp), train_acc(rnn)
    a_stgcn = split_accuracy(stgcn, recs, man)
    elapsed = time.perf_counter() - start
    ok = a_mlp == 1.0 and a_rnn == 1.0 and a_stgcn >= 0.90 and elapsed < 300
    verdict(4, ok, f"MLP train {100 * a_mlp:.1f}%, RNN train {100 * a_rnn:.1f}%, "
            f"STGCN test {100 * a_stgcn:.1f}% on 300 sequences ({elapsed:.0f}s)")


# -- 5. split invariants --------------------------------------------------------------------

CODES = ["1", "2", "3", "4", "5"]


def _label(code):
    return PhonologicalLabel(code, "Neutral", "Neutral", "BackAndForth", "imrp", "One Handed")


def attainable(n, ratios):
    """Smallest max |count - r n| over all allocations with every split >= 1."""
    best = math.inf
    for a in range(1, n - 1):
        for b in range(1, n - a):
            c = n - a - b
            best = min(best, max(abs(k - r * n) for k, r in zip((a, b, c), ratios)))
    return best


def strict_deviation(manifest, records, unit):
    """Per class: (n, max |count - r n|) counting ``unit(record)``."""
    where = manifest.assignment()
    members, per = defaultdict(set), defaultdict(lambda: defaultdict(set))
    for r in records:
        cls = r.label[manifest.spec.kind]
        members[cls].add(unit(r))
        per[cls][where[r.video_id]].add(unit(r))
    out = {}
    for cls, m in members.items():
        n = len(m)
        out[cls] = (n, max(abs(len(per[cls][s]) - r * n)
                           for s, r in zip(("train", "val", "test"), manifest.spec.ratios)))
    return out


def random_dataset(rng, gloss_mode):
    k = int(rng.integers(1, 6))
    recs = []
    for c in CODES[:k]:
        if gloss_mode:
            for g in range(int(rng.integers(3, 15))):
                for v in range(int(rng.integers(1, 5))):
                    recs.append(SignRecord(f"{c}-{g}-{v}", f"g{c}-{g}", "s", None, _label(c)))
        else:
            for v in range(int(rng.integers(3, 60))):
                recs.append(SignRecord(f"{c}-{v}", f"g{c}-{v % 4}", "s", None, _label(c)))
    return recs


def test_criterion_5_split_invariants():
    rng = np.random.default_rng(55)
    structural, strict, forced, nondet = [], [], Counter(), []
    for i in range(100):
        seed = int(rng.integers(0, 2**63))
        for mode in (SplitMode.PHONEME, SplitMode.GLOSS):
            gloss_mode = mode is SplitMode.GLOSS
            recs = random_dataset(rng, gloss_mode)
            spec = SplitSpec(PropertyKind.FLEXION, mode, seed=seed)
            m = make_split(recs, spec)
            rules = set(verify_split(m, recs).rules())
            # disjointness, coverage, min-1, gloss leakage
            bad = rules & {"Disjointness", "Coverage", "UnknownId", "MissingClass", "GlossLeak"}
            if bad:
                structural.append((i, mode.value, sorted(bad)))
            unit = (lambda r: r.gloss) if gloss_mode else (lambda r: r.video_id)
            for cls, (n, dev) in strict_deviation(m, recs, unit).items():
                floor = attainable(n, spec.ratios)
                if floor > 1 + 1e-9:
                    # no allocation with one item per split meets the bound
                    forced[n] += 1
                    if dev > floor + 1e-9:
                        strict.append((i, mode.value, cls, n, dev))
                elif dev > 1 + 1e-9:
                    strict.append((i, mode.value, cls, n, dev))
            if m.dumps() != make_split(list(reversed(recs)), spec).dumps():
                nondet.append((i, mode.value))
    ok = not structural and not strict and not nondet
    note = (f"; classes of size {sorted(forced)} cannot meet deviation <= 1 under min-1 "
            f"({sum(forced.values())} cases, allocated at the attainable minimum)" if forced else "")
    verdict(5, ok, f"100 phoneme + 100 gloss datasets: structural violations {len(structural)}, "
            f"deviation > 1 {len(strict)}, nondeterministic {len(nondet)}{note}")


# -- 6. metric oracle equivalence -----------------------------------------------------------


def test_criterion_6_metric_oracle():
    rng = np.random.default_rng(66)
    worst = 0.0
    identity = True
    for _ in range(100):
        k = int(rng.integers(2, 11))
        n = int(rng.integers(1, 201))
        classes = [f"c{i}" for i in range(k)]
        true = [str(c) for c in rng.choice(classes, size=n)]
        keep = rng.random(n) < rng.random()
        pred = [t if keep[j] else str(rng.choice(classes)) for j, t in enumerate(true)]
        m = metrics(ConfusionMatrix.from_labels(true, pred))
        ref = brute_metrics(true, pred)
        worst = max(worst, max(abs(getattr(m, name) - ref[name]) for name in Metrics.NAMES))
        identity &= m.balanced_accuracy == m.macro_recall
    worst_bin = 0.0
    for tp, fn, fp, tn in itertools.product(range(0, 13, 3), range(0, 13, 4), range(0, 13, 5), range(0, 13, 2)):
        if tp + fn + fp + tn == 0:
            continue
        worst_bin = max(worst_bin, abs(multiclass_mcc(np.array([[tp, fn], [fp, tn]]))
                                       - oracle_binary_mcc(tp, tn, fp, fn)))
    ok = worst <= 1e-9 and worst_bin <= 1e-12 and identity
    verdict(6, ok, f"max |metric - oracle| {worst:.1e} over 100 sets, "
            f"binary MCC gap {worst_bin:.1e}, Abar == R_M: {identity}")


# -- 7. agreement analysis ----------------------------------------------------------------------


def test_criterion_7_agreement():
    k_hand = fleiss_kappa([[2, 1], [1, 2]], 3)
    k_perfect = fleiss_kappa([[3, 0, 0], [0, 0, 3], [0, 3, 0]], 3)
    rng = np.random.default_rng(77)
    mismatches = 0
    for _ in range(50):
        ids = [f"v{i}" for i in range(int(rng.integers(5, 40)))]
        truth = {v: str(rng.choice(["1", "2", "3"])) for v in ids}
        reports = []
        for m in range(3):
            rows = [(v, t, t if rng.random() < 0.4 else str(rng.choice(["1", "2", "3", "4"])))
                    for v, t in truth.items()]
            reports.append(EvalReport.build(PropertyKind.FLEXION, "phoneme", f"m{m}", rows))
        got, _, _ = joint_misclassified(reports)
        brute = set(ids)
        for r in reports:
            brute &= {v for v, t, p in r.records if t != p}
        mismatches += got != sorted(brute)
    ok = abs(k_hand + 1 / 3) <= 1e-12 and abs(k_perfect - 1.0) <= 1e-12 and mismatches == 0
    verdict(7, ok, f"kappa hand example {k_hand:.6f}, perfect agreement {k_perfect:.6f}, "
            f"joint-set mismatches {mismatches}/50")


# -- 8. seed study -------------------------------------------------------------------------------


def test_criterion_8_seed_study():
    recs = separable_dataset(n_per_class=10, kind=KIND4, frames=30, seed=8, noise=0.6, offset=0.3)
    man = make_split(recs, SplitSpec(KIND4, seed=2))
    study = seed_study(recs, man, ModelConfig("mlp", num_classes=1, frames=30, hidden_dim=8),
                       TrainConfig(learning_rate=1e-3, epochs=5), n_seeds=5)
    accs = study.accuracies
    mean = sum(accs) / 5
    sample_std = math.sqrt(sum((a - mean) ** 2 for a in accs) / 4)
    base = seed_study(recs, man, ModelConfig("baseline", num_classes=1), TrainConfig(), n_seeds=5)
    shape = re.compile(r"\d+\.\d{2} ± \d+\.\d{2}")
    ok = (len(accs) == 5 and abs(study.std - sample_std) <= 1e-12
          and shape.fullmatch(study.formatted()) is not None
          and base.std == 0.0 and shape.fullmatch(base.formatted()) is not None)
    verdict(8, ok, f"MLP over seeds {study.seeds}: {study.formatted()}; "
            f"baseline {base.formatted()} (std {base.std})")


# -- 9. pipeline determinism ----------------------------------------------------------------------


def cli(*args):
    proc = subprocess.run([sys.executable, "-m", "phonorec", *map(str, args)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


BUNDLED = Path(__file__).parent / "fixtures" / "tiny"


def run_pipeline(root: Path, seed: int):
    cli("build", "--lexicon", BUNDLED / "lexicon.csv", "--index", BUNDLED / "index.csv",
        "--keypoints", BUNDLED, "--frames", 30, "--out", root / "ds")
    cli("split", "--dataset", root / "ds", "--property", "selected_fingers", "--seed", seed,
        "--out", root / "split")
    cfg = root / "exp.json"
    cfg.write_text(json.dumps({"model": {"variant": "rnn", "frames": 30, "hidden_dim": 6, "dropout": 0.1},
                               "train": {"learning_rate": 1e-2, "epochs": 3, "batch_size": 2}}))
    cli("train", "--config", cfg, "--dataset", root / "ds", "--manifest", root / "split/manifest.json",
        "--seed", seed, "--final-fit", "--out", root / "model")
    cli("eval", "--dataset", root / "ds", "--manifest", root / "split/manifest.json",
        "--model", root / "model/model.ckpt", "--out", root / "eval")
    cli("report", root / "eval/report.json", "--out", root / "table")


def artefacts(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("run.log", ".lock")}


def test_criterion_9_pipeline_determinism(tmp_path):
    run_pipeline(tmp_path / "a", 5)
    run_pipeline(tmp_path / "b", 5)
    a, b = artefacts(tmp_path / "a"), artefacts(tmp_path / "b")
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = a.keys() == b.keys() and not differ
    verdict(9, ok, f"two CLI runs on the bundled fixture (build, split, train, eval, report): {len(a)} files, "
            f"{len(differ)} differ" + (f" {differ[:5]}" if differ else ""))
