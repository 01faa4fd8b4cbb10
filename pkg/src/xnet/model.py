"""The dual encoder-decoder network: two U-shaped modules in a row.

Each module runs two convolution stages per resolution on the way down
(full, half, quarter) and mirrors them on the way up, with the encoder
feature maps of matching resolution concatenated into the decoder so
fine detail survives the pooling.  The second module consumes the first
module's full-resolution output; a final 1x1 convolution maps to class
logits and a pixelwise softmax turns those into probabilities.

Parameters live in :class:`ModelParams`, an ordered list of named
(kernel, bias) pairs whose shapes are fully determined by
:class:`ArchConfig`.  Checkpoints serialize the config as text followed
by raw little-endian float32 tensors, guarded by a config fingerprint.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, StateError
from .kvconfig import format_kv, parse_bool, parse_int_pair, parse_kv
from .tensor import (
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

CHECKPOINT_MAGIC = b"XNETCKP1"


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the network.

    ``input_size`` must be divisible by 4 (two 2x poolings per module).
    ``filters_per_stage`` gives the channel width at full, half and
    quarter resolution; it defaults to ``(base, 2*base, 4*base)``.
    ``modules`` and ``kernel`` are fixed by the architecture and only
    kept as fields so configs spell the full shape out.
    """

    input_size: tuple[int, int] = (200, 200)
    num_classes: int = 3
    base_filters: int = 32
    filters_per_stage: Optional[tuple[int, ...]] = None
    modules: int = 2
    kernel: int = 3
    l2_lambda: float = 5e-4
    inter_module_skip: bool = False

    def __post_init__(self):
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 4 or w % 4:
            raise ConfigError(
                f"input_size must be positive and divisible by 4, got {h}x{w}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.modules != 2:
            raise ConfigError(f"modules is fixed at 2, got {self.modules}")
        if self.kernel != 3:
            raise ConfigError(f"kernel is fixed at 3, got {self.kernel}")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.filters_per_stage is not None:
            if len(self.filters_per_stage) != 3:
                raise ConfigError(
                    "filters_per_stage needs one width per resolution stage "
                    f"(3), got {len(self.filters_per_stage)}"
                )
            if any(f < 1 for f in self.filters_per_stage):
                raise ConfigError("filters_per_stage entries must be >= 1")
        # Canonicalise so configs that resolve to the same widths compare
        # equal (and fingerprint identically) regardless of how they were
        # spelled.
        b = self.base_filters
        resolved = (
            tuple(self.filters_per_stage)
            if self.filters_per_stage is not None
            else (b, 2 * b, 4 * b)
        )
        object.__setattr__(self, "filters_per_stage", resolved)
        if self.inter_module_skip:
            raise ConfigError(
                "inter_module_skip is reserved: no cross-module wiring is defined yet"
            )

    def stage_filters(self) -> tuple[int, int, int]:
        return self.filters_per_stage  # type: ignore[return-value]

    def to_kv(self) -> dict[str, str]:
        f = self.stage_filters()
        return {
            "input_size": f"{self.input_size[0]},{self.input_size[1]}",
            "num_classes": str(self.num_classes),
            "base_filters": str(self.base_filters),
            "filters_per_stage": ",".join(str(x) for x in f),
            "modules": str(self.modules),
            "kernel": str(self.kernel),
            "l2_lambda": repr(self.l2_lambda),
            "inter_module_skip": "true" if self.inter_module_skip else "false",
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ArchConfig":
        known = {
            "input_size", "num_classes", "base_filters", "filters_per_stage",
            "modules", "kernel", "l2_lambda", "inter_module_skip",
        }
        unknown = set(kv) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        out = {}
        if "input_size" in kv:
            out["input_size"] = parse_int_pair("input_size", kv["input_size"])
        for key in ("num_classes", "base_filters", "modules", "kernel"):
            if key in kv:
                out[key] = int(kv[key])
        if "filters_per_stage" in kv:
            out["filters_per_stage"] = tuple(
                int(x) for x in kv["filters_per_stage"].split(",")
            )
        if "l2_lambda" in kv:
            out["l2_lambda"] = float(kv["l2_lambda"])
        if "inter_module_skip" in kv:
            out["inter_module_skip"] = parse_bool(
                "inter_module_skip", kv["inter_module_skip"]
            )
        return cls(**out)

    def fingerprint(self) -> str:
        canonical = format_kv(dict(sorted(self.to_kv().items())))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def layer_plan(config: ArchConfig) -> list[tuple[str, int, int, int]]:
    """Ordered ``(layer_id, cout, cin, kernel_size)`` for every conv layer."""
    f0, f1, f2 = config.stage_filters()
    plan: list[tuple[str, int, int, int]] = []
    cin = 1
    for m in (1, 2):
        p = f"m{m}."
        plan += [
            (p + "enc0a", f0, cin, 3), (p + "enc0b", f0, f0, 3),
            (p + "enc1a", f1, f0, 3), (p + "enc1b", f1, f1, 3),
            (p + "mid_a", f2, f1, 3), (p + "mid_b", f2, f2, 3),
            (p + "dec1a", f1, f2 + f1, 3), (p + "dec1b", f1, f1, 3),
            (p + "dec0a", f0, f1 + f0, 3), (p + "dec0b", f0, f0, 3),
        ]
        cin = f0
    plan.append(("head", config.num_classes, f0, 1))
    return plan


@dataclass
class ParamLayer:
    layer_id: str
    kernel: Tensor4
    bias: Tensor4


@dataclass
class ModelParams:
    """Ordered trainable state of one network instance."""

    config: ArchConfig
    layers: list[ParamLayer] = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def __getitem__(self, layer_id: str) -> ParamLayer:
        for pl in self.layers:
            if pl.layer_id == layer_id:
                return pl
        raise KeyError(layer_id)

    def kernels(self) -> list[Tensor4]:
        return [pl.kernel for pl in self.layers]

    def num_parameters(self) -> int:
        return sum(pl.kernel.data.size + pl.bias.data.size for pl in self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            layers=[
                ParamLayer(pl.layer_id, Tensor4(pl.kernel.data.copy()),
                           Tensor4(pl.bias.data.copy()))
                for pl in self.layers
            ],
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            config=self.config,
            layers=[
                ParamLayer(pl.layer_id, Tensor4(pl.kernel.data.astype(dtype)),
                           Tensor4(pl.bias.data.astype(dtype)))
                for pl in self.layers
            ],
        )

    def validate_shapes(self):
        """Check every layer against the plan implied by the config."""
        plan = layer_plan(self.config)
        if len(plan) != len(self.layers):
            raise ConfigError(
                f"expected {len(plan)} layers, found {len(self.layers)}"
            )
        for (lid, cout, cin, k), pl in zip(plan, self.layers):
            if pl.layer_id != lid:
                raise ConfigError(f"layer order mismatch: {pl.layer_id} != {lid}")
            want = (cout, cin, k, k)
            if pl.kernel.data.shape != want:
                raise ConfigError(
                    f"{lid}: kernel shape {pl.kernel.data.shape} != {want}"
                )
            if pl.bias.data.shape != (cout,):
                raise ConfigError(
                    f"{lid}: bias shape {pl.bias.data.shape} != {(cout,)}"
                )


def build_xnet(config: ArchConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Deterministically initialize a network: He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for lid, cout, cin, k in layer_plan(config):
        fan_in = cin * k * k
        std = np.sqrt(2.0 / fan_in)
        kernel = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
        bias = np.zeros(cout, dtype=dtype)
        layers.append(ParamLayer(lid, Tensor4(kernel, name=lid + ".kernel"),
                                 Tensor4(bias, name=lid + ".bias")))
    return ModelParams(config=config, layers=layers)


@dataclass
class ParamGrads:
    """Gradients in the same ordered layout as :class:`ModelParams`."""

    layers: list[tuple[str, np.ndarray, np.ndarray]]

    def __getitem__(self, layer_id: str) -> tuple[np.ndarray, np.ndarray]:
        for lid, dk, db in self.layers:
            if lid == layer_id:
                return dk, db
        raise KeyError(layer_id)


class XNet:
    """Stateful wrapper running forward and backward passes over one
    :class:`ModelParams` instance.

    Inference forwards are side-effect free; a training-mode forward
    retains the graph so ``backward`` can run against it.
    """

    def __init__(self, params: ModelParams):
        params.validate_shapes()
        self.params = params
        self.activations: dict[str, Tensor4] = {}
        self.last_loss: Optional[float] = None
        self._probs: Optional[Tensor4] = None
        self._batch_shape: Optional[tuple] = None

    def forward(self, batch, train_mode: bool = False) -> Tensor4:
        """Probability map ``(n, num_classes, h, w)`` for a ``(n, 1, h, w)`` batch."""
        data = batch.data if isinstance(batch, Tensor4) else np.asarray(batch)
        if data.ndim != 4:
            raise DimensionError(f"forward: batch must be 4-D, got {data.ndim}-D")
        n, c, h, w = data.shape
        if c != 1:
            raise DimensionError(f"forward: expected 1 input channel (axis 1), got {c}")
        if (h, w) != self.params.config.input_size:
            raise DimensionError(
                f"forward: spatial size {h}x{w} != configured "
                f"{self.params.config.input_size[0]}x{self.params.config.input_size[1]}"
            )
        dtype = self.params.layers[0].kernel.data.dtype
        x = Tensor4(data.astype(dtype, copy=False))

        self.activations = {}
        probs = self._run(x, record=train_mode)
        if train_mode:
            self._probs = probs
            self._batch_shape = data.shape
            return probs
        self._probs = None
        return probs.detach()

    def _conv_relu(self, layer_id: str, t: Tensor4) -> Tensor4:
        pl = self.params[layer_id]
        return relu(conv2d(t, pl.kernel, pl.bias))

    def _run(self, x: Tensor4, record: bool) -> Tensor4:
        t = x
        for m in (1, 2):
            p = f"m{m}."
            t = self._conv_relu(p + "enc0a", t)
            t = self._conv_relu(p + "enc0b", t)
            skip0 = t
            t, _ = maxpool2x2(t)
            t = self._conv_relu(p + "enc1a", t)
            t = self._conv_relu(p + "enc1b", t)
            skip1 = t
            t, _ = maxpool2x2(t)
            t = self._conv_relu(p + "mid_a", t)
            t = self._conv_relu(p + "mid_b", t)
            t = upsample_nearest2x(t)
            t = concat_channels(t, skip1)
            t = self._conv_relu(p + "dec1a", t)
            t = self._conv_relu(p + "dec1b", t)
            t = upsample_nearest2x(t)
            t = concat_channels(t, skip0)
            t = self._conv_relu(p + "dec0a", t)
            t = self._conv_relu(p + "dec0b", t)
            if record:
                self.activations[p + "skip0"] = skip0
                self.activations[p + "skip1"] = skip1
        head = self.params["head"]
        logits = conv2d(t, head.kernel, head.bias)
        if record:
            self.activations["logits"] = logits
        return softmax_pixelwise(logits)

    def backward(self, labels: np.ndarray, l2_lambda: Optional[float] = None) -> ParamGrads:
        """Gradient of mean cross-entropy plus the L2 kernel penalty.

        Requires a preceding training-mode :meth:`forward`; the retained
        graph is consumed (a new forward is needed for the next step).
        """
        if self._probs is None:
            raise StateError("backward called without a training-mode forward")
        lam = self.params.config.l2_lambda if l2_lambda is None else l2_lambda
        data_loss = cross_entropy_loss(self._probs, labels)
        if lam > 0:
            total = data_loss + l2_penalty(self.params.kernels(), lam)
        else:
            total = data_loss
        total.backward()
        self.last_loss = float(data_loss.data)
        self._probs = None
        return ParamGrads(
            layers=[
                (pl.layer_id, pl.kernel.grad, pl.bias.grad)
                for pl in self.params.layers
            ]
        )


def save_checkpoint(params: ModelParams, path):
    """Write config text, fingerprint and float32 tensors to ``path``."""
    config_text = format_kv(params.config.to_kv()).encode()
    fp = params.fingerprint.encode()
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<I", len(config_text)), config_text,
              struct.pack("<I", len(fp)), fp,
              struct.pack("<I", 2 * len(params.layers))]
    for pl in params.layers:
        for suffix, tensor in (("kernel", pl.kernel), ("bias", pl.bias)):
            name = f"{pl.layer_id}.{suffix}".encode()
            arr = tensor.data.astype("<f4")
            chunks.append(struct.pack("<H", len(name)))
            chunks.append(name)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated checkpoint at byte {self.pos} "
                f"(needed {n} more bytes)"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, dtype=np.float64,
                    expect_config: Optional[ArchConfig] = None) -> ModelParams:
    """Read a checkpoint, verify its fingerprint and layer shapes.

    With ``expect_config`` given, also reject a checkpoint built for a
    different architecture.
    """
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    magic = rd.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    (clen,) = rd.unpack("<I")
    config = ArchConfig.from_kv(parse_kv(rd.take(clen).decode()))
    (flen,) = rd.unpack("<I")
    stored_fp = rd.take(flen).decode()
    if stored_fp != config.fingerprint():
        raise ConfigError(
            f"{path}: fingerprint {stored_fp} does not match config "
            f"({config.fingerprint()})"
        )
    if expect_config is not None and expect_config.fingerprint() != stored_fp:
        raise ConfigError(
            f"{path}: checkpoint fingerprint {stored_fp} does not match the "
            f"requested architecture ({expect_config.fingerprint()})"
        )
    (ntensors,) = rd.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(ntensors):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(dtype)
    layers = []
    for lid, cout, cin, k in layer_plan(config):
        for suffix in ("kernel", "bias"):
            if f"{lid}.{suffix}" not in tensors:
                raise FormatError(f"{path}: missing tensor {lid}.{suffix}")
        layers.append(ParamLayer(lid, Tensor4(tensors[f"{lid}.kernel"], name=lid + ".kernel"),
                                 Tensor4(tensors[f"{lid}.bias"], name=lid + ".bias")))
    params = ModelParams(config=config, layers=layers)
    params.validate_shapes()
    return params
