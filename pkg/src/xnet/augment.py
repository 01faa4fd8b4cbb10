"""Label-consistent geometric augmentation and class-balanced oversampling.

Every warp here moves the image and its mask through the *same* coordinate
mapping: the image is interpolated bilinearly, the mask with nearest
neighbour, so the label set can never grow.  Out-of-frame samples clamp to
the edge pixel, which avoids the fictitious open-beam border that zero fill
would paint around a warped limb.

Validation and test images must never pass through this module; only the
training split is augmented.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import SegmentationSample
from .errors import ConfigError
from .interp import resize_image, resize_mask, sample_bilinear, sample_nearest

__all__ = [
    "AugmentConfig",
    "elastic_field",
    "elastic_transform",
    "affine_transform",
    "random_crop_resize",
    "balance_dataset",
    "balance_dataset_with_provenance",
]


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation knobs.

    The elastic defaults are 8% and 4% of a 200-pixel frame.  None of the
    geometric ranges come from measured data; they are chosen so a warped
    radiograph still looks like a radiograph, and anything stricter or
    looser belongs in this config rather than in code.  Use
    :meth:`for_width` to keep the elastic scales proportional on other
    frame sizes.
    """

    elastic_alpha: float = 16.0
    elastic_sigma: float = 8.0
    rotation_max: float = 15.0
    shear_max: float = 8.0
    translate_max: float = 0.05
    crop_fraction_min: float = 0.7
    per_class_target: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.elastic_alpha < 0:
            raise ConfigError(f"elastic_alpha must be >= 0, got {self.elastic_alpha}")
        if self.elastic_sigma <= 0:
            raise ConfigError(f"elastic_sigma must be > 0, got {self.elastic_sigma}")
        if not 0 < self.crop_fraction_min <= 1:
            raise ConfigError(
                f"crop_fraction_min must be in (0, 1], got {self.crop_fraction_min}"
            )
        if self.per_class_target < 1:
            raise ConfigError(
                f"per_class_target must be >= 1, got {self.per_class_target}"
            )
        for name in ("rotation_max", "shear_max", "translate_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def for_width(cls, width: int, **overrides) -> "AugmentConfig":
        """Config with elastic scales proportional to ``width``."""
        values = {"elastic_alpha": 0.08 * width, "elastic_sigma": 0.04 * width}
        values.update(overrides)
        return cls(**values)


# ---------------------------------------------------------------------------
# elastic


def elastic_field(
    shape: tuple[int, int], alpha: float, sigma: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Random smooth displacement field (rows, cols), in pixels.

    Uniform noise in [-1, 1] per axis, Gaussian-smoothed with ``sigma`` and
    scaled by ``alpha`` — the standard elastic-deformation recipe.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, size=(2,) + tuple(shape))
    d_rows = gaussian_filter(noise[0], sigma) * alpha
    d_cols = gaussian_filter(noise[1], sigma) * alpha
    return d_rows, d_cols


def elastic_transform(
    sample: SegmentationSample, alpha: float, sigma: float, seed: int
) -> SegmentationSample:
    """Warp image and mask through one random smooth displacement field."""
    h, w = sample.image.shape
    d_rows, d_cols = elastic_field((h, w), alpha, sigma, seed)
    rows = np.arange(h, dtype=np.float64)[:, None] + d_rows
    cols = np.arange(w, dtype=np.float64)[None, :] + d_cols
    return replace(
        sample,
        image=sample_bilinear(sample.image, rows, cols),
        mask=sample_nearest(sample.mask, rows, cols),
    )


# ---------------------------------------------------------------------------
# affine


def affine_transform(
    sample: SegmentationSample,
    rotation_deg: float,
    shear_deg: float,
    translate_xy: tuple[float, float],
    seed_for_sampling: int | None = None,
) -> SegmentationSample:
    """One composed affine warp (shear, then rotation, then translation).

    Rotation is about the image centre; positive angles turn content
    counter-clockwise in array coordinates.  ``translate_xy`` is a (col,
    row) shift as a fraction of width and height.  With
    ``seed_for_sampling`` set, each parameter is instead drawn uniformly
    from ±its given magnitude, which is how the oversampler randomises.
    """
    if seed_for_sampling is not None:
        rng = np.random.default_rng(seed_for_sampling)
        rotation_deg = rng.uniform(-abs(rotation_deg), abs(rotation_deg))
        shear_deg = rng.uniform(-abs(shear_deg), abs(shear_deg))
        tx, ty = translate_xy
        translate_xy = (rng.uniform(-abs(tx), abs(tx)), rng.uniform(-abs(ty), abs(ty)))

    h, w = sample.image.shape
    theta = np.deg2rad(rotation_deg)
    phi = np.deg2rad(shear_deg)
    rotate = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    shear = np.array([[1.0, 0.0], [np.tan(phi), 1.0]])  # cols shifted by rows
    forward = rotate @ shear
    inverse = np.linalg.inv(forward)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([translate_xy[1] * h, translate_xy[0] * w])

    out_r = np.arange(h, dtype=np.float64)[:, None]
    out_c = np.arange(w, dtype=np.float64)[None, :]
    dr = out_r - centre[0] - shift[0]
    dc = out_c - centre[1] - shift[1]
    rows = inverse[0, 0] * dr + inverse[0, 1] * dc + centre[0]
    cols = inverse[1, 0] * dr + inverse[1, 1] * dc + centre[1]
    rows, cols = np.broadcast_arrays(rows, cols)
    return replace(
        sample,
        image=sample_bilinear(sample.image, rows, cols),
        mask=sample_nearest(sample.mask, rows, cols),
    )


# ---------------------------------------------------------------------------
# crop


def random_crop_resize(
    sample: SegmentationSample, crop_fraction: float, seed: int
) -> SegmentationSample:
    """Random sub-window of the given *area* fraction, resized back up.

    The window side scales with sqrt(crop_fraction) so the retained area
    matches the requested fraction; ``crop_fraction=1`` is the identity.
    """
    if not 0 < crop_fraction <= 1:
        raise ConfigError(f"crop_fraction must be in (0, 1], got {crop_fraction}")
    h, w = sample.image.shape
    side = np.sqrt(crop_fraction)
    crop_h = max(1, int(round(side * h)))
    crop_w = max(1, int(round(side * w)))
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    image = sample.image[top : top + crop_h, left : left + crop_w]
    mask = sample.mask[top : top + crop_h, left : left + crop_w]
    return replace(
        sample,
        image=resize_image(image, (h, w)),
        mask=resize_mask(mask, (h, w)),
    )


# ---------------------------------------------------------------------------
# oversampling


def _augment_once(
    sample: SegmentationSample, config: AugmentConfig, seed_key: list[int]
) -> tuple[SegmentationSample, str]:
    """One fresh random composition: optional crop, affine, then elastic."""
    rng = np.random.default_rng(seed_key)
    crop_fraction = None
    if config.crop_fraction_min < 1 and rng.random() < 0.5:
        crop_fraction = float(rng.uniform(config.crop_fraction_min, 1.0))
    crop_seed, affine_seed, elastic_seed = (
        int(x) for x in rng.integers(0, 2**63, size=3)
    )
    out = sample
    if crop_fraction is not None:
        out = random_crop_resize(out, crop_fraction, crop_seed)
    out = affine_transform(
        out,
        config.rotation_max,
        config.shear_max,
        (config.translate_max, config.translate_max),
        seed_for_sampling=affine_seed,
    )
    out = elastic_transform(
        out, config.elastic_alpha, config.elastic_sigma, elastic_seed
    )
    provenance = (
        f"{sample.source_id};crop={'none' if crop_fraction is None else f'{crop_fraction:.4f}'};"
        f"affine_seed={affine_seed};elastic_seed={elastic_seed};key={seed_key}"
    )
    return out, provenance


def balance_dataset_with_provenance(
    train_samples: list[SegmentationSample], config: AugmentConfig
) -> tuple[list[SegmentationSample], dict[str, str]]:
    """Oversample every body-part class to exactly ``per_class_target``.

    Originals appear once, unmodified; the remainder cycles through the
    class's originals applying fresh random compositions.  Returns the
    samples plus a provenance note per generated id (source id, transform
    parameters, seeds).
    """
    if not train_samples:
        raise ConfigError("balance_dataset needs at least one training sample")
    by_class: dict[str, list[tuple[int, SegmentationSample]]] = {}
    for global_idx, sample in enumerate(train_samples):
        by_class.setdefault(sample.body_part, []).append((global_idx, sample))

    target = config.per_class_target
    out: list[SegmentationSample] = []
    provenance: dict[str, str] = {}
    for part in sorted(by_class):
        originals = by_class[part]
        if len(originals) > target:
            raise ConfigError(
                f"class {part!r} already has {len(originals)} samples, more than "
                f"per_class_target={target}; cannot include each original once"
            )
        out.extend(sample for _, sample in originals)
        for copy_idx in range(target - len(originals)):
            source_idx, source = originals[copy_idx % len(originals)]
            key = [config.seed, source_idx, copy_idx]
            augmented, note = _augment_once(source, config, key)
            augmented = replace(
                augmented, source_id=f"{source.source_id}-aug{copy_idx:04d}"
            )
            out.append(augmented)
            provenance[augmented.source_id] = note
    return out, provenance


def balance_dataset(
    train_samples: list[SegmentationSample], config: AugmentConfig
) -> list[SegmentationSample]:
    samples, _ = balance_dataset_with_provenance(train_samples, config)
    return samples
