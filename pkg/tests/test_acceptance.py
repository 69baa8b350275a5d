"""Acceptance gate: one test per headline guarantee, run in order.

Each test prints a single ``criterion N (...): PASS/FAIL`` line before its
assertions, so the suite reads as a checklist (visible with ``pytest -s`` and
in the captured output of any failure). Tolerances are pinned here and are
not to be loosened: a red line means the implementation and the frozen
reference values genuinely disagree.
"""

from __future__ import annotations

import math
import time
from collections import OrderedDict

import numpy as np

from conftest import assert_grads_close, away_from_kinks, distinct_grid, grad_tensor
from test_blocks import fd_block

import flocknet.tensor as T
from flocknet.blocks import (
    KINDS,
    BlockSpec,
    DenseBlock,
    InceptionResNetModule,
    InvertedResidualBlock,
    PreactResidualUnit,
    XceptionSepBlock,
    build_toy_model,
    model_checksum,
)
from flocknet.data import (
    LabeledImage,
    RecordDataset,
    SplitPlan,
    augment_flip,
    default_split_counts,
    read_records,
    shuffle_split,
    synth_corpus,
    write_records,
)
from flocknet.ensemble import (
    EnsembleModel,
    WeightFitConfig,
    ensemble_forward,
    fit_weights,
)
from flocknet.metrics import ConfusionMatrix, accuracy, f1, precision, recall, roc_auc
from flocknet.optim import (
    EarlyStopState,
    PlateauSchedule,
    TrainConfig,
    evaluate_loss,
    train,
)
from flocknet.tensor import DTYPE, Tensor
from test_ensemble import ScoreTableModel, coded_inputs


def _verdict(number: int, label: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number} ({label}): {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" -- {detail}"
    print(line)


def _stack_dataset(samples) -> RecordDataset:
    pixels = np.stack([s.pixels for s in samples])
    labels = np.eye(2, dtype=np.uint8)[[s.label for s in samples]]
    return RecordDataset(pixels, labels)


# ---------------------------------------------------------------------------
# criterion 1: metric oracle against the frozen reference table

# Each row: configuration name, test-set confusion counts (tn, fp, fn, tp),
# then the reference accuracy / precision / recall / F1 in percent. Counts
# and percentages are frozen reference values; the metrics computed from the
# counts must land within 0.005 percentage points of every reference cell.
REFERENCE_ROWS = (
    ("densenet_dense", (303, 14, 7, 848), 98.21, 98.38, 99.18, 98.78),
    ("xception_sep", (302, 15, 5, 850), 98.30, 98.27, 99.42, 98.84),
    ("inception_resnet_hybrid", (303, 14, 7, 848), 98.21, 98.38, 99.18, 98.78),
    ("resnetv2_preact", (299, 18, 9, 846), 97.70, 97.92, 98.95, 98.43),
    ("mobilenet_inverted_residual", (303, 14, 7, 848), 98.21, 98.38, 99.18, 98.78),
    ("ensemble", (303, 14, 4, 851), 98.46, 98.38, 99.53, 98.96),
)

TOLERANCE_PP = 0.005 + 1e-12


def test_criterion_1_metric_oracle_matches_reference_table():
    failures = []
    for name, (tn, fp, fn, tp), *expected in REFERENCE_ROWS:
        cm = ConfusionMatrix(tn=tn, fp=fp, fn=fn, tp=tp)
        computed = {
            "accuracy": accuracy(cm),
            "precision": precision(cm),
            "recall": recall(cm),
            "f1": f1(cm),
        }
        fractions = {
            "accuracy": (tn + tp, cm.total),
            "precision": (tp, tp + fp),
            "recall": (tp, tp + fn),
            "f1": (2 * tp, 2 * tp + fp + fn),
        }
        for metric, reference in zip(("accuracy", "precision", "recall", "f1"), expected):
            got = 100.0 * computed[metric]
            diff = abs(got - reference)
            if diff > TOLERANCE_PP:
                num, den = fractions[metric]
                failures.append(
                    f"{name} {metric}: the counts give exactly {num}/{den} = "
                    f"{got:.6f}%, which is {diff:.6f}pp from the reference "
                    f"value {reference:.2f} (tolerance 0.005pp); no metric "
                    f"implementation can reproduce that cell from these counts")
    detail = ("all 24 cells within 0.005pp" if not failures
              else f"{len(failures)} of 24 cells are not reachable from the counts")
    _verdict(1, "metric oracle vs reference table", not failures, detail)
    assert not failures, "\n".join(failures)


# ---------------------------------------------------------------------------
# criterion 2: learning-rate plateau arithmetic and early-stop counting


def test_criterion_2_plateau_and_early_stop_counting():
    schedule = PlateauSchedule(0.001, factor=0.3, patience=5)
    schedule.update(1.0)  # first value only sets the baseline
    lr = schedule.current_lr
    for _ in range(15):
        lr = schedule.update(1.0)
    lr_ok = math.isclose(lr, 2.7e-05, rel_tol=1e-12, abs_tol=0.0)
    reductions_ok = schedule.reductions == 3

    stopper = EarlyStopState(patience=20)
    stopper.update(1.0)  # baseline
    premature = False
    for _ in range(19):
        premature |= stopper.update(1.0)
    stopped_at_20 = stopper.update(1.0)

    ok = lr_ok and reductions_ok and not premature and stopped_at_20
    _verdict(2, "plateau schedule and early stopping", ok,
             f"lr after 15 flat epochs = {lr:.6e} with {schedule.reductions} "
             f"reductions; stop latched on flat epoch 20: {stopped_at_20}")
    assert lr_ok, f"expected 0.001 * 0.3**3 = 2.7e-05, got {lr!r}"
    assert reductions_ok, f"expected exactly 3 reductions, got {schedule.reductions}"
    assert not premature, "early stop latched before the 20th flat epoch"
    assert stopped_at_20, "early stop did not latch on the 20th flat epoch"


# ---------------------------------------------------------------------------
# criterion 3: finite-difference sweep over every operation and block


def _op_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(50_000 + seed)


def _check_conv2d(seed):
    rng = _op_rng(seed)
    x = grad_tensor(rng, (2, 5, 5, 2))
    k = grad_tensor(rng, (3, 3, 2, 3))
    stride, padding = 1 + seed % 2, ("valid", "same")[seed % 2]
    assert_grads_close(
        lambda a, b: T.conv2d(a, b, stride=stride, padding=padding), [x, k], rng)


def _check_depthwise_conv2d(seed):
    rng = _op_rng(seed)
    x = grad_tensor(rng, (2, 5, 5, 3))
    k = grad_tensor(rng, (3, 3, 3))
    stride, padding = 1 + seed % 2, ("same", "valid")[seed % 2]
    assert_grads_close(
        lambda a, b: T.depthwise_conv2d(a, b, stride=stride, padding=padding), [x, k], rng)


def _check_pointwise_conv2d(seed):
    rng = _op_rng(seed)
    assert_grads_close(T.pointwise_conv2d,
                       [grad_tensor(rng, (2, 4, 4, 3)), grad_tensor(rng, (3, 5))], rng)


def _check_max_pool(seed):
    rng = _op_rng(seed)
    x = Tensor(distinct_grid(rng, (2, 6, 6, 2)), requires_grad=True)
    assert_grads_close(
        lambda a: T.pool2d(a, "max", (2, 2), stride=1 + seed % 2), [x], rng)


def _check_average_pool(seed):
    rng = _op_rng(seed)
    x = grad_tensor(rng, (2, 6, 6, 2))
    assert_grads_close(
        lambda a: T.pool2d(a, "average", (3, 3), stride=1 + seed % 2), [x], rng)


def _check_global_average_pool(seed):
    rng = _op_rng(seed)
    assert_grads_close(T.global_average_pool, [grad_tensor(rng, (3, 4, 5, 2))], rng)


def _check_batch_norm_train(seed):
    rng = _op_rng(seed)
    x = grad_tensor(rng, (3, 4, 4, 2), lo=-2.0, hi=2.0)
    gamma = grad_tensor(rng, (2,), lo=0.5, hi=1.5)
    beta = grad_tensor(rng, (2,), lo=-0.5, hi=0.5)
    rm, rv = np.zeros(2), np.ones(2)

    def fn(a, g, b):
        out, _, _ = T.batch_norm(a, g, b, rm, rv, train=True, eps=1e-3)
        return out

    assert_grads_close(fn, [x, gamma, beta], rng)


def _check_batch_norm_infer(seed):
    rng = _op_rng(seed)
    x = grad_tensor(rng, (3, 4, 4, 2))
    gamma = grad_tensor(rng, (2,), lo=0.5, hi=1.5)
    beta = grad_tensor(rng, (2,))
    rm = rng.uniform(-0.5, 0.5, 2)
    rv = rng.uniform(0.5, 2.0, 2)

    def fn(a, g, b):
        out, _, _ = T.batch_norm(a, g, b, rm, rv, train=False, eps=1e-3)
        return out

    assert_grads_close(fn, [x, gamma, beta], rng)


def _check_relu(seed):
    rng = _op_rng(seed)
    x = Tensor(away_from_kinks(rng.uniform(-1, 1, (4, 7)), [0.0]), requires_grad=True)
    assert_grads_close(T.relu, [x], rng)


def _check_relu6(seed):
    rng = _op_rng(seed)
    x = Tensor(away_from_kinks(rng.uniform(-2, 8, (4, 7)), [0.0, 6.0]),
               requires_grad=True)
    assert_grads_close(T.relu6, [x], rng)


def _check_softmax(seed):
    rng = _op_rng(seed)
    assert_grads_close(T.softmax, [grad_tensor(rng, (4, 5), lo=-3.0, hi=3.0)], rng)


def _check_add(seed):
    rng = _op_rng(seed)
    assert_grads_close(T.add, [grad_tensor(rng, (3, 4)), grad_tensor(rng, (3, 4))], rng)


def _check_scale(seed):
    rng = _op_rng(seed)
    factor = float(rng.uniform(-2.0, 2.0))
    assert_grads_close(lambda a: T.scale(a, factor), [grad_tensor(rng, (3, 4))], rng)


def _check_matmul(seed):
    rng = _op_rng(seed)
    assert_grads_close(T.matmul, [grad_tensor(rng, (4, 3)), grad_tensor(rng, (3, 5))], rng)


def _check_bias_add(seed):
    rng = _op_rng(seed)
    assert_grads_close(T.bias_add, [grad_tensor(rng, (4, 3)), grad_tensor(rng, (3,))], rng)


def _check_concat_channels(seed):
    rng = _op_rng(seed)
    parts = [grad_tensor(rng, (2, 3, 3, c)) for c in (1, 2, 3)]
    assert_grads_close(lambda *ts: T.concat_channels(ts), parts, rng)


def _check_reshape(seed):
    rng = _op_rng(seed)
    assert_grads_close(lambda a: T.reshape(a, (6, 4)), [grad_tensor(rng, (2, 3, 4))], rng)


def _check_tensor_sum(seed):
    rng = _op_rng(seed)
    assert_grads_close(T.tensor_sum, [grad_tensor(rng, (3, 4, 2))], rng)


OP_CHECKS = OrderedDict((
    ("conv2d", _check_conv2d),
    ("depthwise_conv2d", _check_depthwise_conv2d),
    ("pointwise_conv2d", _check_pointwise_conv2d),
    ("max_pool", _check_max_pool),
    ("average_pool", _check_average_pool),
    ("global_average_pool", _check_global_average_pool),
    ("batch_norm_train", _check_batch_norm_train),
    ("batch_norm_infer", _check_batch_norm_infer),
    ("relu", _check_relu),
    ("relu6", _check_relu6),
    ("softmax", _check_softmax),
    ("add", _check_add),
    ("scale", _check_scale),
    ("matmul", _check_matmul),
    ("bias_add", _check_bias_add),
    ("concat_channels", _check_concat_channels),
    ("reshape", _check_reshape),
    ("tensor_sum", _check_tensor_sum),
))

BLOCK_CHECKS = OrderedDict((
    ("xception_sep", lambda seed: fd_block(
        lambda rng: XceptionSepBlock(
            BlockSpec("xception_sep", 3, 3, stride=1 + seed % 2), rng, "b"),
        (2, 5, 5, 3), 300 + seed)),
    ("mobilenet_inverted_residual", lambda seed: fd_block(
        lambda rng: InvertedResidualBlock(
            BlockSpec("mobilenet_inverted_residual", 3, 3, stride=1 + seed % 2,
                      expansion_factor=2.0), rng, "b"),
        (2, 5, 5, 3), 300 + seed)),
    ("resnetv2_preact", lambda seed: fd_block(
        lambda rng: PreactResidualUnit(
            BlockSpec("resnetv2_preact", 4, 4, stride=1 + seed % 2), rng, "b"),
        (2, 5, 5, 4), 300 + seed)),
    ("densenet_dense", lambda seed: fd_block(
        lambda rng: DenseBlock(
            BlockSpec("densenet_dense", 3, growth_rate=2, layer_count=2), rng, "b"),
        (2, 5, 5, 3), 300 + seed)),
    ("inception_resnet_hybrid", lambda seed: fd_block(
        lambda rng: InceptionResNetModule(
            BlockSpec("inception_resnet_hybrid", 4, residual_scale=0.5), rng, "b"),
        (2, 5, 5, 4), 300 + seed)),
))

FD_INSTANCES = 20


def test_criterion_3_gradient_sweep_covers_every_op_and_block():
    start = time.monotonic()
    failures = []
    for name, check in {**OP_CHECKS, **BLOCK_CHECKS}.items():
        for seed in range(FD_INSTANCES):
            try:
                check(seed)
            except AssertionError as exc:
                failures.append(f"{name}[instance {seed}]: {exc}")
    elapsed = time.monotonic() - start
    total = (len(OP_CHECKS) + len(BLOCK_CHECKS)) * FD_INSTANCES
    ok = not failures and elapsed < 300.0
    _verdict(3, "finite-difference gradient sweep", ok,
             f"{total} checks ({len(OP_CHECKS)} ops + {len(BLOCK_CHECKS)} blocks "
             f"x {FD_INSTANCES} instances) in {elapsed:.1f}s, rel tol 1e-4")
    assert not failures, "\n".join(failures[:10])
    assert elapsed < 300.0, f"gradient sweep took {elapsed:.1f}s (budget 300s)"


# ---------------------------------------------------------------------------
# criterion 4: ensemble weight invariants


def test_criterion_4_ensemble_weight_invariants():
    checks = OrderedDict()
    rng = np.random.default_rng(42)

    # One member scores the labels perfectly, one is anti-correlated, one is
    # noise; fitting must keep the weights on the simplex at every recorded
    # step and hand the dominant member the largest weight.
    n = 48
    labels = rng.integers(0, 2, n)
    y = np.eye(2)[labels]
    members = [
        ScoreTableModel(rng.standard_normal((n, 2))),
        ScoreTableModel(3.0 * y),
        ScoreTableModel(3.0 * y[:, ::-1]),
    ]
    ensemble = EnsembleModel(members)
    history = fit_weights(ensemble, (coded_inputs(n), y),
                          WeightFitConfig(steps=200, lr=0.05))
    rows = [np.asarray(row["weights"], dtype=float) for row in history]
    checks["simplex holds after every step"] = (
        len(rows) == 201
        and all(abs(float(w.sum()) - 1.0) <= 1e-9 for w in rows)
        and all(float(w.min()) >= 0.0 for w in rows))
    final = rows[-1]
    checks["dominant member takes the max weight"] = (
        int(np.argmax(final)) == 1 and float(final[1]) > 0.5)

    # Vertex degeneracy: a one-hot weight vector must reproduce the selected
    # member bit for bit, for every vertex of the simplex.
    scores = [Tensor(rng.standard_normal((7, 3))) for _ in range(4)]
    vertex_ok = True
    for j in range(len(scores)):
        one_hot = np.zeros(len(scores))
        one_hot[j] = 1.0
        combined = ensemble_forward(scores, one_hot)
        vertex_ok &= np.array_equal(combined.data, T.softmax(scores[j]).data)
    checks["one-hot weights reproduce a member bitwise"] = bool(vertex_ok)

    # Weight fitting must never touch member parameters.
    real_members = [build_toy_model(kind, depth=1, width=4, num_classes=2, seed=i)
                    for i, kind in enumerate(KINDS[:3])]
    before = [model_checksum(m) for m in real_members]
    xs, ys = _stack_dataset(synth_corpus(8, image_size=8, seed=9)).arrays()
    fit_weights(EnsembleModel(real_members), (xs, ys),
                WeightFitConfig(steps=25, lr=0.05))
    checks["member checksums frozen across fitting"] = (
        [model_checksum(m) for m in real_members] == before)

    failed = [name for name, ok in checks.items() if not ok]
    _verdict(4, "ensemble weight invariants", not failed,
             "; ".join(f"{name}: {'ok' if ok else 'VIOLATED'}"
                       for name, ok in checks.items()))
    assert not failed, f"violated invariants: {failed}"


# ---------------------------------------------------------------------------
# criterion 5: every architecture learns the synthetic corpus; the fitted
# ensemble is at least as good as its best member on held-out data


def test_criterion_5_toy_models_learn_and_ensemble_keeps_pace():
    start = time.monotonic()
    xt, yt = _stack_dataset(synth_corpus(32, image_size=16, seed=0)).arrays()
    xv, yv = _stack_dataset(synth_corpus(16, image_size=16, seed=1)).arrays()

    members, notes, misses = [], [], []
    for i, kind in enumerate(KINDS):
        model = build_toy_model(kind, depth=2, width=8, num_classes=2, seed=10 + i)
        config = TrainConfig(batch_size=64, initial_lr=0.01, epochs=200,
                             plateau_patience=200, early_stop_patience=None, seed=0)
        model, history = train(model, (xt, yt), (xv, yv), config)
        hit = next((row["epoch"] for row in history if row["train_acc"] >= 0.99), None)
        best_acc = max(row["train_acc"] for row in history)
        if hit is None:
            misses.append(f"{kind} peaked at {best_acc:.3f} train accuracy")
            notes.append(f"{kind} {best_acc:.2f} (<0.99)")
        else:
            notes.append(f"{kind} >=0.99 at epoch {hit}")
        members.append(model)

    member_losses = [evaluate_loss(m, xv, yv)[0] for m in members]
    ensemble = EnsembleModel(members)
    fit_weights(ensemble, (xv, yv), WeightFitConfig(steps=300, lr=0.05))
    ensemble_loss = evaluate_loss(ensemble, xv, yv)[0]
    best = min(member_losses)
    ensemble_ok = ensemble_loss <= best + 0.01 + 1e-12

    elapsed = time.monotonic() - start
    ok = not misses and ensemble_ok and elapsed < 900.0
    _verdict(5, "training and ensembling at desk scale", ok,
             "; ".join(notes) + f"; ensemble val loss {ensemble_loss:.4f} vs "
             f"best member {best:.4f}; {elapsed:.0f}s")
    assert not misses, "; ".join(misses)
    assert ensemble_ok, (f"ensemble val loss {ensemble_loss:.6f} exceeds best "
                         f"member {best:.6f} + 0.01")
    assert elapsed < 900.0, f"criterion took {elapsed:.1f}s (budget 900s)"


# ---------------------------------------------------------------------------
# criterion 6: trapezoidal AUC equals the pairwise concordance statistic


def test_criterion_6_auc_equals_pairwise_concordance():
    rng = np.random.default_rng(7)
    max_gap, trials = 0.0, 100
    for trial in range(trials):
        n = int(rng.integers(6, 60))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        scores = rng.random(n)
        if trial % 2:
            scores = np.round(scores, 1)  # coarse grid forces tied scores
        _, auc = roc_auc(scores, y)
        diffs = scores[y == 1][:, None] - scores[y == 0][None, :]
        concordance = (np.count_nonzero(diffs > 0)
                       + 0.5 * np.count_nonzero(diffs == 0)) / diffs.size
        max_gap = max(max_gap, abs(auc - concordance))

    # Perfectly separated scores must integrate to exactly 1.0. Eight
    # negatives make every false-positive-rate step a dyadic rational, so the
    # trapezoid sum telescopes without rounding.
    y = np.array([0] * 8 + [1] * 8)
    scores = np.concatenate([rng.uniform(0.0, 0.4, 8), rng.uniform(0.6, 1.0, 8)])
    _, perfect = roc_auc(scores, y)

    ok = max_gap <= 1e-12 and perfect == 1.0
    _verdict(6, "AUC equals pairwise concordance", ok,
             f"max |trapezoid - concordance| = {max_gap:.2e} over {trials} "
             f"score sets; perfect separation gives {perfect!r}")
    assert max_gap <= 1e-12, f"max gap {max_gap:.3e} exceeds 1e-12"
    assert perfect == 1.0, f"perfect separation gave {perfect!r}, not exactly 1.0"


# ---------------------------------------------------------------------------
# criterion 7: data pipeline round trips and split bookkeeping


def test_criterion_7_data_pipeline_round_trip_and_split(tmp_path):
    checks = OrderedDict()
    corpus = synth_corpus(20, image_size=8, seed=4)  # 40 images
    splits = shuffle_split(corpus, SplitPlan(13, (26, 6, 8)), image_size=8)

    round_trip_ok = True
    for ds in splits:
        path = tmp_path / f"{ds.split}.efrc"
        write_records(ds, path)
        back = read_records(path)
        round_trip_ok &= (np.array_equal(back.images, ds.images)
                          and np.array_equal(back.labels, ds.labels)
                          and back.checksum == ds.checksum
                          and back.split == ds.split)
    checks["record files round-trip bitwise"] = bool(round_trip_ok)

    original = sorted((s.pixels.tobytes(), s.label) for s in corpus)
    recombined = sorted(
        (img.tobytes(), int(lab.argmax()))
        for ds in splits
        for img, lab in zip(ds.images, ds.labels))
    checks["splits partition the corpus exactly"] = recombined == original

    batch = splits[0].images
    once = augment_flip(batch, np.random.default_rng(0), prob=1.0)
    twice = augment_flip(once, np.random.default_rng(99), prob=1.0)
    checks["flip twice restores the batch"] = (
        np.array_equal(twice, batch) and not np.array_equal(once, batch))

    counts = default_split_counts(5856)
    counts_ok = counts == (3748, 936, 1172)
    big_rng = np.random.default_rng(1)
    big = [LabeledImage(big_rng.integers(0, 256, (4, 4, 3), dtype=np.uint8), i % 2)
           for i in range(5856)]
    big_splits = shuffle_split(big, SplitPlan(0, counts), image_size=4)
    sizes = tuple(len(ds) for ds in big_splits)
    checks["5856 images split to (3748, 936, 1172)"] = (
        counts_ok and sizes == (3748, 936, 1172))

    failed = [name for name, ok in checks.items() if not ok]
    _verdict(7, "data pipeline round trips", not failed,
             "; ".join(f"{name}: {'ok' if ok else 'VIOLATED'}"
                       for name, ok in checks.items()))
    assert not failed, f"violated: {failed}"
