"""Dense 4-D tensors with reverse-mode automatic differentiation.

Everything the segmentation network needs is built from the handful of
primitives in this module: same-padded cross-correlation, 2x2 max pooling,
nearest-neighbour upsampling, ReLU, channel concatenation, pixelwise
softmax, cross-entropy and an L2 weight penalty.

Each operation computes its forward value eagerly on numpy arrays and
records a closure that propagates gradients to its inputs.  Calling
``backward()`` on a scalar result walks the recorded graph in reverse
topological order and fills the ``grad`` slot of every tensor that
contributed to it.

The canonical layout is ``(batch, channels, height, width)``.  Reductions
produce shape-``()`` tensors and per-channel biases are 1-D; both travel
through the same graph machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, LabelDomainError

# Probabilities are clamped to this floor before any log so a saturated
# softmax cannot produce -inf loss.
PROB_EPS = 1e-12


class Tensor4:
    """A numpy array plus an optional gradient and autodiff bookkeeping.

    ``data`` is 4-D ``(n, c, h, w)`` for feature maps, 1-D for biases and
    0-D for scalar losses.  ``grad`` mirrors ``data``'s shape once
    ``backward()`` has run.
    """

    __slots__ = ("data", "grad", "_parents", "_backprop", "name")

    def __init__(
        self,
        data,
        parents: tuple = (),
        backprop: Optional[Callable[[np.ndarray], None]] = None,
        name: str = "",
    ):
        self.data = np.asarray(data)
        if self.data.ndim not in (0, 1, 4):
            raise DimensionError(
                f"Tensor4 holds 0-D, 1-D or 4-D data, got {self.data.ndim}-D"
            )
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backprop = backprop
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor4":
        """Return a graph-free tensor sharing this tensor's data."""
        return Tensor4(self.data, name=self.name)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode pass seeding d(self)/d(self) = 1.

        ``self`` must be a scalar (shape ``()``).  Gradients of every
        tensor reachable through the recorded graph are accumulated into
        their ``grad`` slots; existing gradients are reset first.
        """
        if self.data.shape != ():
            raise DimensionError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        order = self._toposort()
        for node in order:
            node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    def _toposort(self) -> list:
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def __add__(self, other: "Tensor4") -> "Tensor4":
        if self.data.shape != other.data.shape:
            raise DimensionError(
                f"add: shapes {self.data.shape} and {other.data.shape} differ"
            )
        out = Tensor4(self.data + other.data, parents=(self, other))

        def backprop(g):
            self._accumulate(g)
            other._accumulate(g)

        out._backprop = backprop
        return out

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor4{label}(shape={self.data.shape}, dtype={self.data.dtype})"


# Softmax output: a (n, K, h, w) tensor whose channel vectors are
# probability distributions.  Same class, documented intent.
ProbabilityMap = Tensor4


@dataclass
class PoolIndexMap:
    """Argmax bookkeeping for 2x2 max pooling.

    ``indices[b, c, i, j]`` is the flat row-major index (into the input
    tensor's data) of the cell that won the ``(i, j)`` window.
    """

    pooled_shape: tuple
    indices: np.ndarray

    def validate(self, input_shape: tuple) -> bool:
        """Check every stored index lies inside its own 2x2 window."""
        n, c, h, w = input_shape
        _, _, h2, w2 = self.pooled_shape
        rows = (self.indices // w) % h
        cols = self.indices % w
        ii = np.arange(h2)[None, None, :, None]
        jj = np.arange(w2)[None, None, None, :]
        ok_rows = (rows >= 2 * ii) & (rows < 2 * ii + 2)
        ok_cols = (cols >= 2 * jj) & (cols < 2 * jj + 2)
        bx = self.indices // (c * h * w)
        cx = (self.indices // (h * w)) % c
        ok_plane = (bx == np.arange(n)[:, None, None, None]) & (
            cx == np.arange(c)[None, :, None, None]
        )
        return bool((ok_rows & ok_cols & ok_plane).all())


def _require_4d(t: Tensor4, op: str, role: str):
    if t.data.ndim != 4:
        raise DimensionError(f"{op}: {role} must be 4-D, got {t.data.ndim}-D")


def conv2d(x: Tensor4, kernel: Tensor4, bias: Tensor4) -> Tensor4:
    """Same-padded cross-correlation: ``(n,cin,h,w) -> (n,cout,h,w)``.

    ``kernel`` is ``(cout, cin, kh, kw)`` with odd ``kh``/``kw`` and
    ``bias`` a length-``cout`` vector.  Zero padding keeps the spatial
    size; gradients flow to the input, the kernel and the bias.
    """
    _require_4d(x, "conv2d", "input")
    _require_4d(kernel, "conv2d", "kernel")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise DimensionError(
            f"conv2d: input channels (axis 1) = {cin} but kernel expects {kcin}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel spatial dims must be odd, got {kh}x{kw}")
    if bias.data.ndim != 1 or bias.data.shape[0] != cout:
        raise DimensionError(
            f"conv2d: bias must be 1-D of length {cout}, got shape {bias.data.shape}"
        )

    ph, pw = kh // 2, kw // 2
    if ph or pw:
        padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        padded = x.data
    # im2col: (n, h*w, cin*kh*kw) so the contraction is a plain matmul.
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, cin * kh * kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = cols @ kmat.T
    out += bias.data[None, None, :]
    out = out.transpose(0, 2, 1).reshape(n, cout, h, w)
    res = Tensor4(out, parents=(x, kernel, bias))

    def backprop(g):
        gmat = g.reshape(n, cout, h * w).transpose(0, 2, 1)  # (n, hw, cout)
        bias._accumulate(g.sum(axis=(0, 2, 3)))
        dk = np.matmul(gmat.transpose(0, 2, 1), cols).sum(axis=0)
        kernel._accumulate(dk.reshape(cout, cin, kh, kw))
        dcols = (gmat @ kmat).reshape(n, h, w, cin, kh, kw)
        dpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                dpad[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        x._accumulate(dpad[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else dpad)

    res._backprop = backprop
    return res


def maxpool2x2(x: Tensor4) -> tuple[Tensor4, PoolIndexMap]:
    """Downsample by taking the max of disjoint 2x2 windows.

    Requires even height and width.  Ties go to the first cell in
    row-major window order.  The returned index map records, for every
    output cell, which input cell won; backward routes the incoming
    gradient only to those winners.
    """
    _require_4d(x, "maxpool2x2", "input")
    n, c, h, w = x.data.shape
    if h % 2:
        raise DimensionError(f"maxpool2x2: height (axis 2) = {h} is odd")
    if w % 2:
        raise DimensionError(f"maxpool2x2: width (axis 3) = {w} is odd")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    )
    arg = windows.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    dy, dx = arg // 2, arg % 2
    ii = np.arange(h2)[None, None, :, None]
    jj = np.arange(w2)[None, None, None, :]
    bb = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    flat = ((bb * c + cc) * h + (2 * ii + dy)) * w + (2 * jj + dx)
    index_map = PoolIndexMap(pooled_shape=(n, c, h2, w2), indices=flat)

    res = Tensor4(out, parents=(x,))

    def backprop(g):
        dz = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(dz, arg[..., None], g[..., None], axis=-1)
        dx_full = dz.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(dx_full)

    res._backprop = backprop
    return res, index_map


def upsample_nearest2x(x: Tensor4) -> Tensor4:
    """Replicate every cell into a 2x2 block: ``(h, w) -> (2h, 2w)``.

    Backward is the exact adjoint: each input cell receives the sum of
    its four upstream gradients.
    """
    _require_4d(x, "upsample_nearest2x", "input")
    n, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    res = Tensor4(out, parents=(x,))

    def backprop(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    res._backprop = backprop
    return res


def relu(x: Tensor4) -> Tensor4:
    """Elementwise ``max(x, 0)``; the subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0)
    res = Tensor4(out, parents=(x,))
    mask = x.data > 0

    def backprop(g):
        x._accumulate(g * mask)

    res._backprop = backprop
    return res


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """Stack ``a`` then ``b`` along the channel axis.

    Batch and spatial dims must match; backward splits the upstream
    gradient at the channel boundary.
    """
    _require_4d(a, "concat_channels", "first input")
    _require_4d(b, "concat_channels", "second input")
    for axis, name in ((0, "batch (axis 0)"), (2, "height (axis 2)"), (3, "width (axis 3)")):
        if a.data.shape[axis] != b.data.shape[axis]:
            raise DimensionError(
                f"concat_channels: {name} differs: {a.data.shape[axis]} vs {b.data.shape[axis]}"
            )
    ca = a.data.shape[1]
    res = Tensor4(np.concatenate([a.data, b.data], axis=1), parents=(a, b))

    def backprop(g):
        a._accumulate(g[:, :ca])
        b._accumulate(g[:, ca:])

    res._backprop = backprop
    return res


def softmax_pixelwise(logits: Tensor4) -> ProbabilityMap:
    """Per-pixel softmax over the channel axis.

    Shift-invariant form ``exp(z - max z) / sum exp(z - max z)``, so any
    finite logits give probabilities that sum to 1 per pixel.
    """
    _require_4d(logits, "softmax_pixelwise", "logits")
    if logits.data.shape[1] < 2:
        raise DimensionError(
            f"softmax_pixelwise: need >= 2 channels, got {logits.data.shape[1]}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    res = Tensor4(p, parents=(logits,))

    def backprop(g):
        # Jacobian-vector product of softmax: p * (g - <g, p>).
        logits._accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    res._backprop = backprop
    return res


def cross_entropy_loss(probs: ProbabilityMap, labels: np.ndarray) -> Tensor4:
    """Mean per-pixel negative log-likelihood of the true class.

    ``labels`` is an integer array ``(n, h, w)``; the loss averages
    ``-log p[true]`` over every pixel of every sample in the batch.
    Probabilities are clamped to ``[PROB_EPS, 1]`` before the log.
    Composed with ``softmax_pixelwise`` the backward pass reproduces the
    standard ``(p - onehot) / npixels`` gradient on the logits.
    """
    _require_4d(probs, "cross_entropy_loss", "probabilities")
    n, k, h, w = probs.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(
            f"cross_entropy_loss: labels shape {labels.shape} != {(n, h, w)}"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise LabelDomainError(
            f"cross_entropy_loss: labels must lie in [0, {k}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    idx = labels[:, None, :, :]
    p_true = np.take_along_axis(probs.data, idx, axis=1)
    p_true = np.clip(p_true, PROB_EPS, 1.0)
    npix = n * h * w
    loss = -np.log(p_true).sum() / npix
    res = Tensor4(np.asarray(loss, dtype=probs.data.dtype), parents=(probs,))

    def backprop(g):
        dp = np.zeros_like(probs.data)
        np.put_along_axis(dp, idx, -g / (npix * p_true), axis=1)
        probs._accumulate(dp)

    res._backprop = backprop
    return res


def l2_penalty(kernels: Sequence[Tensor4], lam: float) -> Tensor4:
    """``lam * sum(w^2)`` over the given kernel tensors.

    Biases are deliberately not included.  Backward adds ``2*lam*w`` to
    every kernel gradient.
    """
    if lam < 0:
        raise ValueError(f"l2_penalty: lambda must be >= 0, got {lam}")
    kernels = tuple(kernels)
    total = sum(float((k.data ** 2).sum()) for k in kernels)
    dtype = kernels[0].data.dtype if kernels else np.float64
    res = Tensor4(np.asarray(lam * total, dtype=dtype), parents=kernels)

    def backprop(g):
        for kern in kernels:
            kern._accumulate((2.0 * lam) * kern.data * g)

    res._backprop = backprop
    return res


def tsum(x: Tensor4) -> Tensor4:
    """Sum of all entries as a scalar tensor (handy for gradient checks)."""
    res = Tensor4(np.asarray(x.data.sum(), dtype=x.data.dtype), parents=(x,))

    def backprop(g):
        x._accumulate(np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))

    res._backprop = backprop
    return res


def mul_const(x: Tensor4, c) -> Tensor4:
    """Elementwise product with a constant (no gradient for ``c``)."""
    c = np.asarray(c)
    res = Tensor4(x.data * c, parents=(x,))

    def backprop(g):
        x._accumulate(g * c)

    res._backprop = backprop
    return res
