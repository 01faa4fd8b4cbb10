"""Command-line front end: synth, augment, split, train, predict, eval.

One binary, subcommand style.  Everything beyond paths and a couple of
convenience flags lives in a flat ``key = value`` config file; flags
override file values, and every run echoes its effective configuration to
the output directory so it can be replayed exactly (``--config`` that
echo and you get the same artifacts back).

Randomness: the single config ``seed`` is the only entropy source.  Each
component derives its own stream by hashing its name (CRC-32) together
with the seed, so synth, split, augmentation, weight init and batch
shuffling stay independent but reproducible.  Within ``synth``, phantom
``i`` uses ``seed + i``, which makes phantom identity a pure function of
(profile, seed) — the manifest id tells you how to regenerate the image.

Exit codes: 0 success, 1 usage, 2 configuration (including impossible
splits and checkpoint fingerprint mismatches), 3 I/O (missing or
malformed files), 4 numeric abort (non-finite values, undefined metrics).
"""

from __future__ import annotations

import argparse
import sys
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, balance_dataset_with_provenance
from .data import (
    LABEL_NAMES,
    PHANTOM_PROFILES,
    DatasetManifest,
    SegmentationSample,
    assign_splits,
    load_manifest,
    load_sample,
    preprocess,
    read_pgm16,
    resize_sample,
    save_dataset,
    synthesize_phantom,
    write_mask_pgm,
)
from .errors import (
    ConfigError,
    FormatError,
    NumericError,
    UndefinedMetricError,
    XNetError,
)
from .interp import resize_image, resize_mask
from .kvconfig import format_kv, parse_bool, parse_int_pair, parse_kv
from .metrics import (
    calibration_gap,
    evaluate_segmentation,
    metrics_report_csv,
    reliability_csv,
    reliability_histogram,
    render_mask_png,
    roc_auc,
    roc_points_csv,
    threshold_soft_tissue,
)
from .model import ArchConfig, ModelParams, XNet, build_xnet, load_checkpoint
from .train import TrainConfig, stack_samples, train

__all__ = ["RunConfig", "component_seed", "load_run_config", "main"]

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CONFIG_ECHO = "config.txt"
CHECKPOINT_NAME = "checkpoint.xnet"
TRAINING_LOG_NAME = "training_log.csv"

_THRESHOLD_PREFIX = "soft_tissue_threshold."


def component_seed(seed: int, component: str) -> int:
    """Derive a component's seed from the run seed and the component name.

    The name is hashed with CRC-32 and folded into a seed sequence with
    the run seed, so distinct components get independent streams while
    identical (seed, component) pairs always agree across runs and hosts.
    """
    digest = zlib.crc32(component.encode("ascii"))
    return int(np.random.SeedSequence([seed, digest]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# run configuration


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Flat configuration for every subcommand.

    Fields map one-to-one onto config-file keys.  ``explicit`` records
    which keys were actually given (file or flag) so derived defaults —
    currently the elastic scales, which track frame width — only kick in
    for keys the user left out.
    """

    # paths and the master seed
    data_dir: str = "dataset"
    out_dir: str = "out"
    seed: int = 0
    dtype: str = "float64"
    # architecture
    input_size: tuple[int, int] = (200, 200)
    num_classes: int = 3
    base_filters: int = 32
    filters_per_stage: Optional[tuple[int, ...]] = None
    modules: int = 2
    kernel: int = 3
    inter_module_skip: bool = False
    # optimisation
    learning_rate: float = 1e-4
    batch_size: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 20
    max_epochs: int = 100
    l2_lambda: float = 5e-4
    # augmentation
    elastic_alpha: float = 16.0
    elastic_sigma: float = 8.0
    rotation_max: float = 15.0
    shear_max: float = 8.0
    translate_max: float = 0.05
    crop_fraction_min: float = 0.7
    per_class_target: int = 500
    # splitting
    train_fraction: float = 0.72
    val_fraction: float = 0.14
    # synthesis
    synth_count: int = 60
    synth_profiles: tuple[str, ...] = PHANTOM_PROFILES
    phantom_size: tuple[int, int] = (200, 200)
    noise_std: float = 0.02
    # evaluation
    soft_tissue_threshold: Optional[float] = None
    threshold_by_part: tuple[tuple[str, float], ...] = ()
    explicit: frozenset = field(default_factory=frozenset, compare=False)

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("train_fraction", "val_fraction"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {value}")
        if self.train_fraction + self.val_fraction >= 1:
            raise ConfigError(
                "train_fraction + val_fraction must leave room for test, got "
                f"{self.train_fraction} + {self.val_fraction}"
            )
        if self.synth_count < 0:
            raise ConfigError(f"synth_count must be >= 0, got {self.synth_count}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not self.synth_profiles:
            raise ConfigError("synth_profiles must name at least one profile")
        for profile in self.synth_profiles:
            if profile not in PHANTOM_PROFILES:
                raise ConfigError(
                    f"unknown phantom profile {profile!r}; "
                    f"expected one of {PHANTOM_PROFILES}"
                )
        thresholds = dict(self.threshold_by_part)
        if self.soft_tissue_threshold is not None:
            thresholds[""] = self.soft_tissue_threshold
        for part, tau in thresholds.items():
            if not 0.0 <= tau <= 1.0:
                where = f" for {part!r}" if part else ""
                raise ConfigError(
                    f"soft_tissue_threshold{where} must be in [0, 1], got {tau}"
                )

    # -- conversions into the per-module configs

    def numpy_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def arch(self) -> ArchConfig:
        return ArchConfig(
            input_size=self.input_size,
            num_classes=self.num_classes,
            base_filters=self.base_filters,
            filters_per_stage=self.filters_per_stage,
            modules=self.modules,
            kernel=self.kernel,
            l2_lambda=self.l2_lambda,
            inter_module_skip=self.inter_module_skip,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=component_seed(self.seed, "train"),
            l2_lambda=self.l2_lambda,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            elastic_alpha=self.elastic_alpha,
            elastic_sigma=self.elastic_sigma,
            rotation_max=self.rotation_max,
            shear_max=self.shear_max,
            translate_max=self.translate_max,
            crop_fraction_min=self.crop_fraction_min,
            per_class_target=self.per_class_target,
            seed=component_seed(self.seed, "augment"),
        )

    def resolve_elastic(self, width: int) -> "RunConfig":
        """Pin elastic scales to the actual frame width unless set by hand."""
        updates = {}
        if "elastic_alpha" not in self.explicit:
            updates["elastic_alpha"] = 0.08 * width
        if "elastic_sigma" not in self.explicit:
            updates["elastic_sigma"] = 0.04 * width
        if not updates:
            return self
        return replace(
            self, explicit=self.explicit | set(updates), **updates
        )

    # -- (de)serialisation

    def to_kv(self) -> dict[str, str]:
        out = {}
        for name in _CONFIG_KEYS:
            value = getattr(self, name)
            if value is None:
                continue
            out[name] = _fmt(value)
        for part, tau in self.threshold_by_part:
            out[_THRESHOLD_PREFIX + part] = repr(tau)
        return out

    def to_text(self) -> str:
        return "# effective configuration; replay with --config <this file>\n" + (
            format_kv(self.to_kv())
        )

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "RunConfig":
        unknown = [
            key
            for key in kv
            if key not in _CONFIG_KEYS
            and not (key.startswith(_THRESHOLD_PREFIX) and key[len(_THRESHOLD_PREFIX):])
        ]
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values: dict = {}
        by_part = []
        for key, raw in kv.items():
            if key.startswith(_THRESHOLD_PREFIX):
                by_part.append((key[len(_THRESHOLD_PREFIX):], _parse_float(key, raw)))
                continue
            values[key] = _CONFIG_PARSERS[key](key, raw)
        if by_part:
            values["threshold_by_part"] = tuple(sorted(by_part))
        config = cls(**values, explicit=frozenset(kv))
        return config


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _parse_str(key: str, raw: str) -> str:
    return raw


def _parse_filters(key: str, raw: str) -> tuple[int, ...]:
    return tuple(_parse_int(key, part.strip()) for part in raw.split(","))


def _parse_profiles(key: str, raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


_CONFIG_PARSERS = {
    "data_dir": _parse_str,
    "out_dir": _parse_str,
    "seed": _parse_int,
    "dtype": _parse_str,
    "input_size": parse_int_pair,
    "num_classes": _parse_int,
    "base_filters": _parse_int,
    "filters_per_stage": _parse_filters,
    "modules": _parse_int,
    "kernel": _parse_int,
    "inter_module_skip": parse_bool,
    "learning_rate": _parse_float,
    "batch_size": _parse_int,
    "beta1": _parse_float,
    "beta2": _parse_float,
    "epsilon": _parse_float,
    "patience": _parse_int,
    "max_epochs": _parse_int,
    "l2_lambda": _parse_float,
    "elastic_alpha": _parse_float,
    "elastic_sigma": _parse_float,
    "rotation_max": _parse_float,
    "shear_max": _parse_float,
    "translate_max": _parse_float,
    "crop_fraction_min": _parse_float,
    "per_class_target": _parse_int,
    "train_fraction": _parse_float,
    "val_fraction": _parse_float,
    "synth_count": _parse_int,
    "synth_profiles": _parse_profiles,
    "phantom_size": parse_int_pair,
    "noise_std": _parse_float,
    "soft_tissue_threshold": _parse_float,
}

_CONFIG_KEYS = tuple(_CONFIG_PARSERS)


def load_run_config(
    config_path: Optional[str], overrides: dict[str, str]
) -> RunConfig:
    """Defaults, then the config file, then flag overrides."""
    kv: dict[str, str] = {}
    if config_path is not None:
        kv = parse_kv(Path(config_path).read_text(encoding="utf-8"))
    kv.update(overrides)
    return RunConfig.from_kv(kv)


def echo_config(config: RunConfig, directory: Path, name: str = CONFIG_ECHO) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(config.to_text(), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# shared helpers


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict[str, str]:
    """Flag values (already strings) for every flag the user actually set."""
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def _config_from(args: argparse.Namespace, mapping: dict[str, str]) -> RunConfig:
    return load_run_config(args.config, _overrides(args, mapping))


def _require_split_rows(manifest: DatasetManifest, split: str) -> list:
    rows = manifest.by_split(split)
    if not rows:
        raise ConfigError(
            f"manifest has no rows in split {split!r}; run the split "
            "subcommand (or set split_override) first"
        )
    return rows


def _load_resized(root: Path, rows, size: tuple[int, int]) -> list[SegmentationSample]:
    samples = []
    for row in rows:
        sample = load_sample(root, row)
        if sample.image.shape != size:
            sample = resize_sample(sample, size)
        samples.append(sample)
    return samples


def _forward_probs(params: ModelParams, images: np.ndarray, batch_size: int) -> np.ndarray:
    net = XNet(params)
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(net.forward(images[start : start + batch_size]).data)
    return np.concatenate(chunks, axis=0)


def _part_slug(name: str) -> str:
    return name.replace(" ", "_")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config_from(
        args,
        {
            "count": "synth_count",
            "profiles": "synth_profiles",
            "seed": "seed",
            "out_dir": "out_dir",
            "size": "phantom_size",
            "noise_std": "noise_std",
        },
    )
    out_dir = Path(config.out_dir)
    samples = []
    for i in range(config.synth_count):
        profile = config.synth_profiles[i % len(config.synth_profiles)]
        samples.append(
            synthesize_phantom(
                seed=config.seed + i,
                class_profile=profile,
                size=config.phantom_size,
                noise_std=config.noise_std,
            )
        )
    save_dataset(out_dir, samples)
    echo_config(config, out_dir)
    print(f"synth: wrote {len(samples)} phantoms to {out_dir}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    config = _config_from(
        args,
        {
            "data": "data_dir",
            "seed": "seed",
            "train_fraction": "train_fraction",
            "val_fraction": "val_fraction",
        },
    )
    root = Path(config.data_dir)
    manifest = load_manifest(root / "manifest.csv")
    pairs = [(row.source_id, row.body_part) for row in manifest.rows]
    splits = assign_splits(
        pairs,
        component_seed(config.seed, "split"),
        train_fraction=config.train_fraction,
        val_fraction=config.val_fraction,
    )
    rows = [replace(row, split=splits[row.source_id]) for row in manifest.rows]
    updated = DatasetManifest(rows)
    updated.save(root / "manifest.csv")
    echo_config(config, root, name="split_config.txt")
    counts = updated.counts()
    print(
        f"split: {counts['train']} train / {counts['val']} val / "
        f"{counts['test']} test in {root / 'manifest.csv'}"
    )
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    config = _config_from(
        args,
        {
            "data": "data_dir",
            "out_dir": "out_dir",
            "seed": "seed",
            "target": "per_class_target",
        },
    )
    root = Path(config.data_dir)
    out_dir = Path(config.out_dir)
    manifest = load_manifest(root / "manifest.csv")
    has_splits = any(row.effective_split() for row in manifest.rows)
    train_rows = _require_split_rows(manifest, "train") if has_splits else manifest.rows
    train_samples = [load_sample(root, row) for row in train_rows]

    config = config.resolve_elastic(train_samples[0].image.shape[1])
    balanced, provenance = balance_dataset_with_provenance(
        train_samples, config.augment_config()
    )

    samples = list(balanced)
    splits = {sample.source_id: "train" for sample in balanced} if has_splits else {}
    for split in ("val", "test"):
        for row in manifest.by_split(split):
            samples.append(load_sample(root, row))
            splits[row.source_id] = split
    save_dataset(out_dir, samples, splits=splits, provenance=provenance)
    echo_config(config, out_dir)
    print(
        f"augment: {len(train_samples)} training samples balanced to "
        f"{len(balanced)} ({config.per_class_target}/class) in {out_dir}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from(
        args,
        {
            "data": "data_dir",
            "out_dir": "out_dir",
            "seed": "seed",
            "dtype": "dtype",
            "max_epochs": "max_epochs",
        },
    )
    root = Path(config.data_dir)
    out_dir = Path(config.out_dir)
    manifest = load_manifest(root / "manifest.csv")
    dtype = config.numpy_dtype()

    train_samples = _load_resized(
        root, _require_split_rows(manifest, "train"), config.input_size
    )
    val_samples = _load_resized(
        root, _require_split_rows(manifest, "val"), config.input_size
    )
    train_images, train_labels = stack_samples(train_samples)
    val_images, val_labels = stack_samples(val_samples)
    train_set = (train_images.astype(dtype), train_labels)
    val_set = (val_images.astype(dtype), val_labels)

    params = build_xnet(config.arch(), seed=component_seed(config.seed, "init"), dtype=dtype)
    echo_config(config, out_dir)
    best, log = train(
        params,
        train_set,
        val_set,
        config.train_config(),
        checkpoint_path=out_dir / CHECKPOINT_NAME,
    )
    log.to_csv(out_dir / TRAINING_LOG_NAME)
    best_entry = min(log.entries, key=lambda e: e.val_loss)
    print(
        f"train: {len(log.entries)} epochs on {len(train_samples)} samples; "
        f"best val loss {best_entry.val_loss:.6f} (epoch {best_entry.epoch}, "
        f"val accuracy {best_entry.val_accuracy:.4f})"
    )
    print(f"train: checkpoint {out_dir / CHECKPOINT_NAME}")
    return 0


def _predict_inputs(
    args: argparse.Namespace, config: RunConfig, size: tuple[int, int]
) -> list[tuple[str, np.ndarray]]:
    """(id, raw image) pairs, resized to the network's input size."""
    pairs: list[tuple[str, np.ndarray]] = []
    if args.images:
        for path in args.images:
            image = read_pgm16(path).astype(np.float64)
            if image.shape != size:
                image = resize_image(image, size)
            pairs.append((Path(path).stem, image))
        return pairs
    root = Path(config.data_dir)
    manifest = load_manifest(root / "manifest.csv")
    rows = _require_split_rows(manifest, args.split) if args.split else manifest.rows
    for row, sample in zip(rows, _load_resized(root, rows, size)):
        pairs.append((row.source_id, sample.image))
    return pairs


def cmd_predict(args: argparse.Namespace) -> int:
    config = _config_from(
        args,
        {"data": "data_dir", "out_dir": "out_dir", "dtype": "dtype"},
    )
    dtype = config.numpy_dtype()
    params = load_checkpoint(args.checkpoint, dtype=dtype)
    size = params.config.input_size
    out_dir = Path(config.out_dir)

    pairs = _predict_inputs(args, config, size)
    if not pairs:
        raise ConfigError("predict: no input images")
    images = np.stack([preprocess(image) for _, image in pairs])[:, None].astype(dtype)
    probs = _forward_probs(params, images, config.batch_size)

    for sub in ("masks", "png", "prob"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for (source_id, _), prob in zip(pairs, probs):
        mask = prob.argmax(axis=0).astype(np.uint8)
        write_mask_pgm(out_dir / "masks" / f"{source_id}.pgm", mask)
        render_mask_png(mask, out_dir / "png" / f"{source_id}.png")
        np.save(out_dir / "prob" / f"{source_id}.npy", prob.astype(np.float64))
    echo_config(config, out_dir)
    print(f"predict: wrote masks, renders and probability maps for "
          f"{len(pairs)} images to {out_dir}")
    return 0


def _eval_probs(
    args: argparse.Namespace, config: RunConfig, rows, root: Path
) -> tuple[np.ndarray, np.ndarray]:
    """Probability maps plus ground truth at matching resolution."""
    if args.pred_dir:
        prob_list = []
        for row in rows:
            prob_list.append(
                np.load(Path(args.pred_dir) / "prob" / f"{row.source_id}.npy")
            )
        shapes = {p.shape for p in prob_list}
        if len(shapes) != 1:
            raise FormatError(
                f"probability maps disagree on shape: {sorted(shapes)}"
            )
        probs = np.stack(prob_list)
        size = probs.shape[-2:]
        truth = np.stack(
            [
                resize_mask(load_sample(root, row).mask, size)
                for row in rows
            ]
        )
        return probs, truth
    dtype = config.numpy_dtype()
    params = load_checkpoint(args.checkpoint, dtype=dtype)
    size = params.config.input_size
    samples = _load_resized(root, rows, size)
    images, truth = stack_samples(samples)
    probs = _forward_probs(params, images.astype(dtype), config.batch_size)
    return probs.astype(np.float64), truth


def _threshold_predictions(
    probs: np.ndarray, rows, config: RunConfig
) -> tuple[Optional[np.ndarray], list[str]]:
    """Apply global/per-body-part soft-tissue thresholds, if any."""
    by_part = dict(config.threshold_by_part)
    notes = []
    if config.soft_tissue_threshold is None and not by_part:
        return None, notes
    pred = np.empty(probs.shape[:1] + probs.shape[2:], dtype=np.intp)
    for i, row in enumerate(rows):
        tau = by_part.get(row.body_part, config.soft_tissue_threshold)
        if tau is None:
            pred[i] = probs[i : i + 1].argmax(axis=1)[0]
        else:
            pred[i] = threshold_soft_tissue(probs[i : i + 1], tau)[0]
    if config.soft_tissue_threshold is not None:
        notes.append(f"soft-tissue threshold {config.soft_tissue_threshold}")
    for part in sorted(by_part):
        notes.append(f"threshold {by_part[part]} for body part {part!r}")
    return pred, notes


def _print_report(metrics, cm, gaps, weighted_gap) -> None:
    header = (
        f"{'class':<18}{'support':>9}{'predicted':>11}{'accuracy':>10}"
        f"{'precision':>11}{'f1':>8}{'auc':>8}{'confidence':>12}{'gap':>7}"
    )
    print(header)
    predicted = cm.counts.sum(axis=0)
    for k, name in enumerate(LABEL_NAMES):
        print(
            f"{name:<18}{metrics.support[k]:>9d}{predicted[k]:>11d}"
            f"{metrics.accuracy[k]:>10.4f}{metrics.precision[k]:>11.4f}"
            f"{metrics.f1[k]:>8.4f}{metrics.auc[k]:>8.4f}"
            f"{metrics.confidence[k]:>12.4f}{gaps[k]:>7.4f}"
        )
    print(
        f"{'weighted average':<18}{metrics.support.sum():>9d}{predicted.sum():>11d}"
        f"{metrics.weighted('accuracy'):>10.4f}{metrics.weighted('precision'):>11.4f}"
        f"{metrics.weighted('f1'):>8.4f}{metrics.weighted('auc'):>8.4f}"
        f"{metrics.weighted('confidence'):>12.4f}{weighted_gap:>7.4f}"
    )


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config_from(
        args,
        {
            "data": "data_dir",
            "out_dir": "out_dir",
            "dtype": "dtype",
            "soft_tissue_threshold": "soft_tissue_threshold",
        },
    )
    root = Path(config.data_dir)
    out_dir = Path(config.out_dir)
    manifest = load_manifest(root / "manifest.csv")
    has_splits = any(row.effective_split() for row in manifest.rows)
    rows = _require_split_rows(manifest, args.split) if has_splits else manifest.rows

    probs, truth = _eval_probs(args, config, rows, root)
    pred, notes = _threshold_predictions(probs, rows, config)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        metrics, cm = evaluate_segmentation(
            probs, truth, config.num_classes, pred_mask=pred
        )
        gaps, weighted_gap = calibration_gap(metrics)
    for warning in caught:
        print(f"warning: {warning.message}", file=sys.stderr)

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_report_csv(metrics, out_dir / "metrics.csv")
    reliability_csv(reliability_histogram(probs, truth), out_dir / "reliability.csv")
    for k, name in enumerate(LABEL_NAMES):
        try:
            curve, _ = roc_auc(probs, truth, k)
        except UndefinedMetricError:
            continue
        roc_points_csv(curve, out_dir / f"roc_{_part_slug(name)}.csv")
    echo_config(config, out_dir)

    for note in notes:
        print(f"eval: {note}")
    print(f"eval: {len(rows)} images, {truth.size} pixels")
    _print_report(metrics, cm, gaps, weighted_gap)
    print(f"eval: reports in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures on exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flag(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE", help="key = value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="xnet",
        description="Dual encoder-decoder X-ray segmentation toolkit.",
        epilog="exit codes: 1 usage, 2 configuration, 3 I/O, 4 numeric",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth", help="generate a phantom dataset")
    _add_config_flag(synth)
    synth.add_argument("--count", type=_int_str, help="number of phantoms")
    synth.add_argument("--profiles", help="comma-separated phantom profiles")
    synth.add_argument("--seed", type=_int_str)
    synth.add_argument("--out-dir", dest="out_dir")
    synth.add_argument("--size", help="phantom H,W")
    synth.add_argument("--noise-std", dest="noise_std", type=_float_str)
    synth.set_defaults(func=cmd_synth)

    split = subparsers.add_parser("split", help="assign train/val/test in-place")
    _add_config_flag(split)
    split.add_argument("--data", help="dataset directory")
    split.add_argument("--seed", type=_int_str)
    split.add_argument("--train-fraction", dest="train_fraction", type=_float_str)
    split.add_argument("--val-fraction", dest="val_fraction", type=_float_str)
    split.set_defaults(func=cmd_split)

    augment = subparsers.add_parser(
        "augment", help="oversample the training split to a per-class target"
    )
    _add_config_flag(augment)
    augment.add_argument("--data", help="dataset directory")
    augment.add_argument("--out-dir", dest="out_dir")
    augment.add_argument("--seed", type=_int_str)
    augment.add_argument("--target", type=_int_str, help="samples per class")
    augment.set_defaults(func=cmd_augment)

    train_p = subparsers.add_parser("train", help="train a segmenter")
    _add_config_flag(train_p)
    train_p.add_argument("--data", help="dataset directory")
    train_p.add_argument("--out-dir", dest="out_dir")
    train_p.add_argument("--seed", type=_int_str)
    train_p.add_argument("--dtype", choices=("float32", "float64"))
    train_p.add_argument("--max-epochs", dest="max_epochs", type=_int_str)
    train_p.set_defaults(func=cmd_train)

    predict = subparsers.add_parser("predict", help="segment images with a checkpoint")
    _add_config_flag(predict)
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--data", help="dataset directory (manifest mode)")
    predict.add_argument("--split", help="restrict to one split")
    predict.add_argument("--out-dir", dest="out_dir")
    predict.add_argument("--dtype", choices=("float32", "float64"))
    predict.add_argument("images", nargs="*", help="loose PGM images instead of --data")
    predict.set_defaults(func=cmd_predict)

    eval_p = subparsers.add_parser("eval", help="score predictions against a split")
    _add_config_flag(eval_p)
    source = eval_p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint")
    source.add_argument("--pred-dir", dest="pred_dir", help="predict output directory")
    eval_p.add_argument("--data", help="dataset directory")
    eval_p.add_argument("--split", default="test")
    eval_p.add_argument("--out-dir", dest="out_dir")
    eval_p.add_argument("--dtype", choices=("float32", "float64"))
    eval_p.add_argument(
        "--soft-tissue-threshold",
        dest="soft_tissue_threshold",
        type=_float_str,
        help="label soft tissue only above this probability",
    )
    eval_p.set_defaults(func=cmd_eval)
    return parser


def _int_str(raw: str) -> str:
    int(raw)  # fail fast inside argparse for a usage error
    return raw


def _float_str(raw: str) -> str:
    float(raw)
    return raw


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:  # includes SplitError and fingerprint mismatches
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except XNetError as exc:  # dimension/label/state: inconsistent inputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
