"""Release gate: gradient, metric, end-to-end, and determinism criteria.

Each test states its tolerance inline.  The synthetic end-to-end run is
shared by several tests through a module-scoped fixture; it is the slow
part of the suite (minutes, budgeted below), everything else is fast.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import finite_difference, max_rel_error
from xnet.augment import AugmentConfig, balance_dataset
from xnet.data import (
    PHANTOM_PROFILES,
    assign_splits,
    resize_sample,
    synthesize_phantom,
)
from xnet.metrics import (
    ClassMetrics,
    calibration_gap,
    confusion,
    evaluate_segmentation,
    per_class_metrics,
    reliability_histogram,
    roc_auc,
    threshold_soft_tissue,
)
from xnet.model import ArchConfig, XNet, build_xnet
from xnet.tensor import (
    Tensor4,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    l2_penalty,
    maxpool2x2,
    relu,
    softmax_pixelwise,
    tsum,
    upsample_nearest2x,
)
from xnet.train import TrainConfig, stack_samples, train

UNIFORM_BASELINE = float(np.log(3.0))

_timings: dict[str, float] = {}


# ---------------------------------------------------------------------------
# 1. gradient correctness: every op and a miniature whole model


def _mixing_head(out: Tensor4, rng) -> Tensor4:
    """Reduce a 4-D op output to a scalar through a fixed random conv.

    A random 3x3 convolution weights every channel and neighbourhood
    differently, so permuted or misrouted gradients cannot cancel out the
    way they could under a plain sum.
    """
    channels = out.data.shape[1]
    kernel = Tensor4(rng.normal(size=(2, channels, 3, 3)))
    bias = Tensor4(np.zeros(2))
    return tsum(conv2d(out, kernel, bias))


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Shift entries off the rectifier kink so differences are two-sided."""
    out = x.copy()
    small = np.abs(out) < margin
    out[small] += np.where(out[small] >= 0, margin, -margin)
    return out


class TestGradientCorrectness:
    PER_OP_TOL = 1e-5
    MODEL_TOL = 1e-4

    def test_every_op_matches_central_differences(self):
        started = time.perf_counter()
        rng = np.random.default_rng(2024)
        x = Tensor4(rng.normal(size=(2, 3, 6, 6)))
        kernel = Tensor4(rng.normal(scale=0.5, size=(4, 3, 3, 3)))
        bias = Tensor4(rng.normal(scale=0.1, size=4))
        labels = rng.integers(0, 3, size=(2, 6, 6))

        cases = {
            "conv2d": (
                lambda: _mixing_head(conv2d(x, kernel, bias), np.random.default_rng(1)),
                [x, kernel, bias],
            ),
            "relu": (
                lambda: _mixing_head(relu(x), np.random.default_rng(2)),
                [x],
            ),
            "maxpool2x2": (
                lambda: _mixing_head(maxpool2x2(x)[0], np.random.default_rng(3)),
                [x],
            ),
            "upsample_nearest2x": (
                lambda: _mixing_head(upsample_nearest2x(x), np.random.default_rng(4)),
                [x],
            ),
            "concat_channels": (
                lambda: _mixing_head(
                    concat_channels(x, relu(x)), np.random.default_rng(5)
                ),
                [x],
            ),
            "softmax+cross_entropy": (
                lambda: cross_entropy_loss(softmax_pixelwise(x), labels),
                [x],
            ),
            "l2_penalty": (
                lambda: l2_penalty([kernel], 3e-3),
                [kernel],
            ),
        }
        x.data[:] = _away_from_zero(x.data)  # relu probes need generic points
        for name, (build, wrt_list) in cases.items():
            loss = build()
            loss.backward()
            for wrt in wrt_list:
                numeric = finite_difference(lambda: float(build().data), wrt.data)
                rel = max_rel_error(wrt.grad, numeric)
                assert rel < self.PER_OP_TOL, f"{name}: rel error {rel:.3e}"
        _timings["gradients"] = time.perf_counter() - started

    def test_miniature_model_end_to_end_gradients(self):
        started = time.perf_counter()
        rng = np.random.default_rng(99)
        config = ArchConfig(input_size=(8, 8), base_filters=2, l2_lambda=5e-4)
        params = build_xnet(config, seed=41, dtype=np.float64)
        # zero-initialised biases sit exactly on rectifier kinks, where
        # central differences straddle two linear regimes; jitter to a
        # generic point before comparing slopes.
        for pl in params.layers:
            pl.bias.data += rng.normal(scale=0.05, size=pl.bias.data.shape)
        x = rng.normal(size=(2, 1, 8, 8))
        labels = rng.integers(0, 3, size=(2, 8, 8))
        net = XNet(params)

        net.forward(x, train_mode=True)
        grads = net.backward(labels, l2_lambda=config.l2_lambda)

        def total_loss() -> float:
            probs = net.forward(x)
            data = float(cross_entropy_loss(probs, labels).data)
            penalty = config.l2_lambda * sum(
                float((pl.kernel.data ** 2).sum()) for pl in params.layers
            )
            return data + penalty

        worst = 0.0
        for pl in params.layers:
            dk, db = grads[pl.layer_id]
            for analytic, array in ((dk, pl.kernel.data), (db, pl.bias.data)):
                numeric = finite_difference(total_loss, array)
                worst = max(worst, max_rel_error(analytic, numeric))
        assert worst < self.MODEL_TOL, f"whole-model rel error {worst:.3e}"
        _timings["gradients"] += time.perf_counter() - started

    def test_gradient_suite_runtime(self):
        assert _timings["gradients"] < 60.0


# ---------------------------------------------------------------------------
# 2. metric oracles: exact fixtures and the pairwise-rank AUC identity


class TestMetricOracles:
    def test_confusion_fixtures_exact(self):
        started = time.perf_counter()
        pred = np.array([0, 0, 1, 1])
        true = np.array([0, 0, 0, 1])
        cm = confusion(pred, true, 2)
        np.testing.assert_array_equal(cm.counts, [[2, 1], [0, 1]])
        metrics = per_class_metrics(cm)
        assert metrics.accuracy[0] == 2 / 3 and metrics.accuracy[1] == 1.0
        assert metrics.precision[0] == 1.0 and metrics.precision[1] == 1 / 2
        assert metrics.f1[0] == 2 * (1.0 * (2 / 3)) / (1.0 + 2 / 3)
        assert metrics.f1[1] == 2 * ((1 / 2) * 1.0) / ((1 / 2) + 1.0)

        cm3 = confusion(np.array([0, 0, 1, 2]), np.array([0, 1, 1, 2]), 3)
        np.testing.assert_array_equal(cm3.counts, [[1, 0, 0], [1, 1, 0], [0, 0, 1]])
        assert cm3.accuracy() == 3 / 4
        three = per_class_metrics(cm3)
        np.testing.assert_array_equal(three.support, [1, 2, 1])
        np.testing.assert_array_equal(three.accuracy, [1.0, 1 / 2, 1.0])
        np.testing.assert_array_equal(three.precision, [1 / 2, 1.0, 1.0])
        weighted = (three.f1[0] * 1 + three.f1[1] * 2 + three.f1[2] * 1) / 4
        assert three.weighted("f1") == weighted
        _timings["metrics"] = time.perf_counter() - started

    def test_trapezoid_auc_equals_rank_oracle_on_100_instances(self):
        started = time.perf_counter()
        rng = np.random.default_rng(31337)
        for trial in range(100):
            pixels = int(rng.integers(2, 201))
            # quantised scores force tie plateaus on most instances
            scores = np.round(rng.random(pixels), int(rng.integers(1, 3)))
            truth = rng.integers(0, 2, size=pixels)
            if truth.min() == truth.max():
                truth[int(rng.integers(pixels))] ^= 1
            probs = np.zeros((1, 2, 1, pixels))
            probs[0, 1, 0] = scores
            probs[0, 0, 0] = 1.0 - scores
            _, auc = roc_auc(probs, truth.reshape(1, 1, pixels), 1)

            pos = scores[truth == 1]
            neg = scores[truth == 0]
            wins = (pos[:, None] > neg[None, :]).sum()
            ties = (pos[:, None] == neg[None, :]).sum()
            oracle = (wins + 0.5 * ties) / (pos.size * neg.size)
            assert abs(auc - oracle) <= 1e-12, f"instance {trial}"
        _timings["metrics"] += time.perf_counter() - started

    def test_metric_suite_runtime(self):
        assert _timings["metrics"] < 10.0


# ---------------------------------------------------------------------------
# 3-5. the synthetic end-to-end experiment


@pytest.fixture(scope="module")
def synthetic_run():
    """Desk-scale experiment: 50 phantoms, augmented, trained, evaluated.

    36 of the 50 phantoms land in train and inflate to 200 per class; the
    10 evaluation phantoms come from a disjoint seed range and never touch
    training or validation.
    """
    started = time.perf_counter()
    seed = 7
    phantoms = [
        synthesize_phantom(seed=1000 + i, class_profile=PHANTOM_PROFILES[i % 3])
        for i in range(50)
    ]
    held_out = [
        synthesize_phantom(seed=2000 + j, class_profile=PHANTOM_PROFILES[j % 3])
        for j in range(10)
    ]
    splits = assign_splits([(s.source_id, s.body_part) for s in phantoms], seed=seed)
    train_samples = [s for s in phantoms if splits[s.source_id] == "train"]
    val_samples = [s for s in phantoms if splits[s.source_id] == "val"]
    augmented = balance_dataset(
        train_samples, AugmentConfig(per_class_target=200, seed=seed)
    )

    size = (64, 64)
    as_set = lambda samples: stack_samples([resize_sample(s, size) for s in samples])
    train_images, train_labels = as_set(augmented)
    val_images, val_labels = as_set(val_samples)
    test_images, test_labels = as_set(held_out)

    arch = ArchConfig(input_size=size, base_filters=8, l2_lambda=5e-4)
    params = build_xnet(arch, seed=seed, dtype=np.float32)
    config = TrainConfig(
        learning_rate=1e-4,
        batch_size=5,
        patience=20,
        max_epochs=60,
        seed=seed,
        l2_lambda=5e-4,
    )
    best, log = train(
        params,
        (train_images.astype(np.float32), train_labels),
        (val_images.astype(np.float32), val_labels),
        config,
    )

    net = XNet(best)
    probs = np.concatenate(
        [
            net.forward(test_images[i : i + 5].astype(np.float32)).data
            for i in range(0, len(test_images), 5)
        ]
    ).astype(np.float64)
    metrics, cm = evaluate_segmentation(probs, test_labels)
    return SimpleNamespace(
        probs=probs,
        truth=test_labels,
        metrics=metrics,
        cm=cm,
        log=log,
        seconds=time.perf_counter() - started,
    )


class TestSyntheticEndToEnd:
    def test_heldout_accuracy_and_weighted_f1(self, synthetic_run):
        assert synthetic_run.cm.accuracy() >= 0.90
        assert synthetic_run.metrics.weighted("f1") >= 0.90

    def test_per_class_auc(self, synthetic_run):
        assert (synthetic_run.metrics.auc >= 0.95).all(), synthetic_run.metrics.auc

    def test_validation_beats_uniform_baseline_within_5_epochs(self, synthetic_run):
        first5 = [e.val_loss for e in synthetic_run.log.entries[:5]]
        assert min(first5) < UNIFORM_BASELINE

    def test_runtime_under_30_minutes(self, synthetic_run):
        assert synthetic_run.seconds < 1800.0


class TestThresholdTradeoff:
    """Raising the soft-tissue threshold trades true for false positives."""

    def sweep(self, synthetic_run):
        soft_true = synthetic_run.truth == 1
        counts = []
        for tau in np.linspace(0.0, 1.0, 11):
            soft_pred = threshold_soft_tissue(synthetic_run.probs, float(tau)) == 1
            counts.append(
                (
                    float(tau),
                    int((soft_pred & ~soft_true).sum()),
                    int((soft_pred & soft_true).sum()),
                )
            )
        return counts

    def test_false_and_true_positives_never_increase(self, synthetic_run):
        counts = self.sweep(synthetic_run)
        fps = [fp for _, fp, _ in counts]
        tps = [tp for _, _, tp in counts]
        assert fps == sorted(fps, reverse=True)
        assert tps == sorted(tps, reverse=True)

    def test_some_strict_threshold_cuts_fp_but_keeps_tp(self, synthetic_run):
        counts = self.sweep(synthetic_run)
        fp_at_zero = counts[0][1]
        assert any(
            fp < fp_at_zero and tp > 0 for tau, fp, tp in counts if tau > 0.5
        ), counts


class TestCalibrationReporting:
    def test_reliability_histogram_covers_every_pixel(self, synthetic_run):
        rows = reliability_histogram(synthetic_run.probs, synthetic_run.truth)
        assert len(rows) == 10
        assert sum(count for _, count, _, _ in rows) == synthetic_run.truth.size
        for b, count, conf, acc in rows:
            if count:
                assert b / 10 <= conf < (b + 1) / 10 + 1e-12
                assert 0.0 <= acc <= 1.0

    def test_per_class_gaps_are_reported(self, synthetic_run):
        gaps, weighted = calibration_gap(synthetic_run.metrics)
        assert gaps.shape == (3,)
        assert np.isfinite(gaps).all() and (gaps >= 0).all()
        assert np.isfinite(weighted)

    def test_gap_arithmetic_on_published_style_values(self):
        # a support-weighted table whose bone row shows confidence 0.97
        # against accuracy 0.88: the gap must come out as 9 percent, and
        # the weighted columns (0.97 vs 0.92) as 5 percent.
        metrics = ClassMetrics(
            support=np.array([2, 2, 3]),
            accuracy=np.array([0.96, 0.94, 0.88]),
            precision=np.zeros(3),
            f1=np.zeros(3),
            confidence=np.array([0.99, 0.95, 0.97]),
        )
        gaps, weighted = calibration_gap(metrics)
        assert abs(gaps[2] - 0.09) < 1e-12
        assert abs(abs(0.97 - 0.88) - 0.09) < 1e-12
        assert abs(weighted - 0.05) < 1e-12


# ---------------------------------------------------------------------------
# 6. determinism of the whole pipeline


def _reduced_pipeline(checkpoint_path):
    """The end-to-end experiment, shrunk and run at 64-bit."""
    seed = 13
    phantoms = [
        synthesize_phantom(
            seed=3000 + i, class_profile=PHANTOM_PROFILES[i % 3], size=(48, 48)
        )
        for i in range(24)
    ]
    splits = assign_splits([(s.source_id, s.body_part) for s in phantoms], seed=seed)
    train_samples = [s for s in phantoms if splits[s.source_id] == "train"]
    val_samples = [s for s in phantoms if splits[s.source_id] == "val"]
    augmented = balance_dataset(
        train_samples, AugmentConfig.for_width(48, per_class_target=10, seed=seed)
    )
    size = (16, 16)
    train_set = stack_samples([resize_sample(s, size) for s in augmented])
    val_set = stack_samples([resize_sample(s, size) for s in val_samples])
    params = build_xnet(
        ArchConfig(input_size=size, base_filters=2), seed=seed, dtype=np.float64
    )
    config = TrainConfig(seed=seed, max_epochs=4, patience=4)
    _, log = train(params, train_set, val_set, config, checkpoint_path=checkpoint_path)
    return log


class TestDeterminism:
    def test_identical_logs_and_bit_identical_checkpoints(self, tmp_path):
        first = tmp_path / "first.xnet"
        second = tmp_path / "second.xnet"
        log_a = _reduced_pipeline(first)
        log_b = _reduced_pipeline(second)
        assert log_a == log_b  # history comparison; timings excluded
        assert log_a.entries and log_a.entries[0].val_loss != 0.0
        assert first.read_bytes() == second.read_bytes()


# ---------------------------------------------------------------------------
# 7. split protocol on a 150-sample cohort with realistic class imbalance


BODY_PART_COUNTS = {
    "ankle": 10, "arm": 3, "cervical": 1, "chest": 1, "elbow": 1,
    "femur": 3, "foot": 29, "hand": 4, "head": 11, "knee": 37,
    "leg": 1, "lumbar spine": 6, "neck of femur": 15, "pelvis": 2,
    "shoulder": 2, "thigh": 8, "thorax": 1, "tibia": 4, "wrist": 11,
}


class TestSplitProtocol:
    def test_150_sample_cohort_splits_108_21_21(self):
        labelled = [
            (f"{part}-{i:03d}", part)
            for part, count in BODY_PART_COUNTS.items()
            for i in range(count)
        ]
        assert len(labelled) == 150
        splits = assign_splits(labelled, seed=123)
        counts = {name: 0 for name in ("train", "val", "test")}
        for value in splits.values():
            counts[value] += 1
        assert counts == {"train": 108, "val": 21, "test": 21}

        singletons = [p for p, c in BODY_PART_COUNTS.items() if c == 1]
        assert len(singletons) == 5
        for part in singletons:
            assert splits[f"{part}-000"] == "test"

    def test_every_multi_sample_class_reaches_val_and_test(self):
        labelled = [
            (f"{part}-{i:03d}", part)
            for part, count in BODY_PART_COUNTS.items()
            for i in range(count)
        ]
        splits = assign_splits(labelled, seed=123)
        for part, count in BODY_PART_COUNTS.items():
            if count == 1:
                continue
            assigned = {splits[f"{part}-{i:03d}"] for i in range(count)}
            assert {"val", "test"} <= assigned, part
