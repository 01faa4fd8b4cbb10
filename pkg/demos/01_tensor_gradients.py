"""
Automatic differentiation on image batches
==========================================

The tensor engine records every operation applied to a batch and replays
the chain in reverse to accumulate gradients.  This walkthrough builds a
tiny convolutional pipeline by hand, asks for gradients, and checks a few
of them against central finite differences.
"""

import numpy as np

from xnet.tensor import (
    Tensor4,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    l2_penalty,
    maxpool2x2,
    relu,
    softmax_pixelwise,
    upsample_nearest2x,
)

rng = np.random.default_rng(42)

# ---------------------------------------------------------------------------
# forward: a miniature two-layer pipeline on a 2-image batch

x = Tensor4(rng.normal(size=(2, 1, 8, 8)))          # 2 images, 1 channel
k1 = Tensor4(rng.normal(scale=0.5, size=(4, 1, 3, 3)))
b1 = Tensor4(rng.normal(scale=0.1, size=4))
k2 = Tensor4(rng.normal(scale=0.5, size=(3, 8, 3, 3)))
b2 = Tensor4(rng.normal(scale=0.1, size=3))

labels = rng.integers(0, 3, size=(2, 8, 8))


def forward() -> Tensor4:
    hidden = relu(conv2d(x, k1, b1))                  # (2, 4, 8, 8)
    pooled, _ = maxpool2x2(hidden)                    # (2, 4, 4, 4)
    back_up = upsample_nearest2x(pooled)              # (2, 4, 8, 8)
    both = concat_channels(back_up, hidden)           # (2, 8, 8, 8) skip join
    probs = softmax_pixelwise(conv2d(both, k2, b2))   # (2, 3, 8, 8)
    return cross_entropy_loss(probs, labels) + l2_penalty([k1, k2], 1e-3)


loss = forward()
print("loss:", float(loss.data))

# ---------------------------------------------------------------------------
# backward: one call fills .grad on everything upstream

loss.backward()
for name, tensor in [("x", x), ("k1", k1), ("b1", b1), ("k2", k2), ("b2", b2)]:
    print(f"grad[{name}]: shape {tensor.grad.shape}, "
          f"|g| max {np.abs(tensor.grad).max():.4f}")

# ---------------------------------------------------------------------------
# spot-check against central differences: nudge one entry of k1 both ways
# and compare the slope with the recorded gradient

eps = 1e-6
worst = 0.0
for _ in range(10):
    index = tuple(int(rng.integers(0, s)) for s in k1.data.shape)
    keep = k1.data[index]
    k1.data[index] = keep + eps
    up = float(forward().data)
    k1.data[index] = keep - eps
    down = float(forward().data)
    k1.data[index] = keep
    numeric = (up - down) / (2 * eps)
    analytic = k1.grad[index]
    rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-12)
    worst = max(worst, rel)
    print(f"k1{index}: numeric {numeric:+.8f}  analytic {analytic:+.8f}  rel {rel:.2e}")
print(f"worst relative error over 10 probes: {worst:.2e}")
