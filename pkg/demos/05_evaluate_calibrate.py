"""
Evaluation, calibration, and soft-tissue thresholding
=====================================================

Segmentation quality is judged per class (accuracy-as-recall, precision,
F1, one-vs-rest AUC) with support-weighted averages, and the network's
probabilities are checked for calibration: does 90% confidence mean 90%
correct?  Finally, the soft-tissue decision can trade true positives for
false positives through a probability threshold.

Run 04_train_segmenter.py first; this script reuses its checkpoint.
"""

from pathlib import Path

import numpy as np

from xnet.data import PHANTOM_PROFILES, resize_sample, synthesize_phantom
from xnet.metrics import (
    calibration_gap,
    evaluate_segmentation,
    reliability_histogram,
    render_mask_png,
    threshold_soft_tissue,
)
from xnet.model import XNet, load_checkpoint
from xnet.train import stack_samples

run = Path("demo_output/run")
out = Path("demo_output/eval")
out.mkdir(parents=True, exist_ok=True)

# ---------------------------------------------------------------------------
# fresh phantoms the training run never saw

held_out = [
    synthesize_phantom(seed=900 + j, class_profile=PHANTOM_PROFILES[j % 3])
    for j in range(6)
]
params = load_checkpoint(run / "checkpoint.xnet", dtype=np.float32)
size = params.config.input_size
images, truth = stack_samples([resize_sample(s, size) for s in held_out])

net = XNet(params)
probs = net.forward(images.astype(np.float32)).data.astype(np.float64)
print(f"probability maps: {probs.shape}, rows sum to "
      f"{probs.sum(axis=1).mean():.6f}")

# ---------------------------------------------------------------------------
# the full per-class report from one call

metrics, cm = evaluate_segmentation(probs, truth)
gaps, weighted_gap = calibration_gap(metrics)
print("\nconfusion matrix (rows true, columns predicted):")
print(cm.counts)
names = ("open beam", "soft tissue", "bone")
print(f"\n{'class':<12}{'support':>9}{'acc':>7}{'prec':>7}{'f1':>7}"
      f"{'auc':>7}{'conf':>7}{'gap':>7}")
for k, name in enumerate(names):
    print(f"{name:<12}{metrics.support[k]:>9d}{metrics.accuracy[k]:>7.3f}"
          f"{metrics.precision[k]:>7.3f}{metrics.f1[k]:>7.3f}"
          f"{metrics.auc[k]:>7.3f}{metrics.confidence[k]:>7.3f}{gaps[k]:>7.3f}")
print(f"{'weighted':<12}{metrics.support.sum():>9d}"
      f"{metrics.weighted('accuracy'):>7.3f}{metrics.weighted('precision'):>7.3f}"
      f"{metrics.weighted('f1'):>7.3f}{metrics.weighted('auc'):>7.3f}"
      f"{metrics.weighted('confidence'):>7.3f}{weighted_gap:>7.3f}")

# ---------------------------------------------------------------------------
# reliability: bucket pixels by predicted-class probability and compare
# each bucket's confidence with its actual hit rate

print("\nreliability (bin, pixels, mean confidence, accuracy):")
for b, count, conf, acc in reliability_histogram(probs, truth):
    if count:
        print(f"  [{b / 10:.1f}, {(b + 1) / 10:.1f}): {count:6d}  "
              f"{conf:.3f} vs {acc:.3f}")

# ---------------------------------------------------------------------------
# thresholding the soft-tissue decision: demand more confidence, get
# fewer false positives, lose some true positives

soft_true = truth == 1
print("\ntau    FP      TP")
for tau in (0.0, 0.5, 0.9):
    pred = threshold_soft_tissue(probs, tau)
    soft_pred = pred == 1
    fp = int((soft_pred & ~soft_true).sum())
    tp = int((soft_pred & soft_true).sum())
    print(f"{tau:.1f}  {fp:6d}  {tp:6d}")

# ---------------------------------------------------------------------------
# a rendered mask for eyeballing: purple open beam, green soft tissue,
# yellow bone

render_mask_png(probs[0].argmax(axis=0).astype(np.uint8), out / "prediction.png")
render_mask_png(truth[0].astype(np.uint8), out / "truth.png")
print(f"\nwrote {out / 'prediction.png'} and {out / 'truth.png'}")
