"""Dataset plumbing: sample containers, PGM files, splits, and phantoms.

The on-disk layout for a dataset directory is::

    images/<id>.pgm     16-bit binary PGM, maxval 65535, big-endian samples
    masks/<id>.pgm      8-bit binary PGM, maxval 255, values restricted to {0,1,2}
    manifest.csv        header ``id,image,mask,body_part,split`` plus the
                        optional columns ``provenance`` and ``split_override``

Mask labels are 0 = open beam (background), 1 = soft tissue, 2 = bone.
Metal implants count as bone.  ``split_override`` lets a curator pin
individual rows to a split (for example to enrich the test set with known
difficult images) without touching the assignment algorithm; readers must
honour the override when it is present.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, LabelDomainError, SplitError
from .interp import resize_image, resize_mask

__all__ = [
    "LABEL_NAMES",
    "SegmentationSample",
    "ManifestRow",
    "DatasetManifest",
    "preprocess",
    "resize_sample",
    "write_pgm16",
    "read_pgm16",
    "write_mask_pgm",
    "read_mask_pgm",
    "assign_splits",
    "split_dataset",
    "PHANTOM_PROFILES",
    "phantom_regions",
    "synthesize_phantom",
    "save_dataset",
    "load_manifest",
    "load_sample",
    "load_dataset",
]

LABEL_NAMES = ("open beam", "soft tissue", "bone")

MAX_PIXEL = 65535

_SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# containers


@dataclass
class SegmentationSample:
    """One image-mask pair with its provenance tags.

    ``image`` holds raw detector intensities as float64; ``mask`` holds one
    label per pixel.  Both are 2-D and share a shape.
    """

    source_id: str
    image: np.ndarray
    mask: np.ndarray
    body_part: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2:
            raise DimensionError(
                f"image must be 2-D, got ndim={self.image.ndim} for {self.source_id!r}"
            )
        if self.mask.shape != self.image.shape:
            raise DimensionError(
                f"mask shape {self.mask.shape} != image shape {self.image.shape} "
                f"for {self.source_id!r}"
            )
        bad = np.setdiff1d(np.unique(self.mask), [0, 1, 2])
        if bad.size:
            raise LabelDomainError(
                f"mask for {self.source_id!r} contains labels outside {{0,1,2}}: "
                f"{bad.tolist()}"
            )
        self.mask = self.mask.astype(np.uint8)


@dataclass
class ManifestRow:
    source_id: str
    image: str
    mask: str
    body_part: str
    split: str = ""
    provenance: str = ""
    split_override: str = ""

    def effective_split(self) -> str:
        return self.split_override or self.split


@dataclass
class DatasetManifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.source_id in seen:
                raise FormatError(f"duplicate manifest id {row.source_id!r}")
            seen.add(row.source_id)
            for value, col in ((row.split, "split"), (row.split_override, "split_override")):
                if value and value not in _SPLITS:
                    raise FormatError(
                        f"manifest row {row.source_id!r} has {col}={value!r}; "
                        f"expected one of {_SPLITS} or empty"
                    )

    def ids(self) -> list[str]:
        return [row.source_id for row in self.rows]

    def by_split(self, split: str) -> list[ManifestRow]:
        return [row for row in self.rows if row.effective_split() == split]

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in _SPLITS}
        out[""] = 0
        for row in self.rows:
            out[row.effective_split()] += 1
        return out

    def save(self, path) -> None:
        path = Path(path)
        extras = []
        if any(row.provenance for row in self.rows):
            extras.append("provenance")
        if any(row.split_override for row in self.rows):
            extras.append("split_override")
        header = ["id", "image", "mask", "body_part", "split"] + extras
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self.rows:
                record = [row.source_id, row.image, row.mask, row.body_part, row.split]
                record += [getattr(row, col) for col in extras]
                writer.writerow(record)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read ``manifest.csv``; referenced files must exist next to it."""
    path = Path(path)
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest") from None
        required = ["id", "image", "mask", "body_part", "split"]
        if header[: len(required)] != required:
            raise FormatError(
                f"{path}: manifest header must start with {','.join(required)}, "
                f"got {','.join(header)}"
            )
        extras = header[len(required):]
        unknown = set(extras) - {"provenance", "split_override"}
        if unknown:
            raise FormatError(f"{path}: unknown manifest columns {sorted(unknown)}")
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}"
                )
            base = dict(zip(("source_id", "image", "mask", "body_part", "split"), record))
            base.update(dict(zip(extras, record[len(required):])))
            rows.append(ManifestRow(**base))
    manifest = DatasetManifest(rows)
    if check_files:
        for row in manifest.rows:
            for rel in (row.image, row.mask):
                target = root / PurePosixPath(rel)
                if not target.is_file():
                    raise FormatError(f"{path}: missing file {rel!r} for id {row.source_id!r}")
    return manifest


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(image: np.ndarray) -> np.ndarray:
    """Centre an image on its own mean and scale into [-1, 1].

    Per-image statistics only, so inference needs no stored constants.
    Constant images come back as all zeros.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise DimensionError("cannot preprocess an empty image")
    x = x - x.mean()
    peak = np.abs(x).max()
    if peak > 0:
        x = x / peak
    return x


def resize_sample(sample: SegmentationSample, target: tuple[int, int]) -> SegmentationSample:
    """Resize image (bilinear) and mask (nearest) to ``target`` = (rows, cols)."""
    return replace(
        sample,
        image=resize_image(sample.image, target),
        mask=resize_mask(sample.mask, target),
    )


# ---------------------------------------------------------------------------
# PGM codec


def write_pgm16(path, image: np.ndarray) -> None:
    """Write a 16-bit binary PGM (maxval 65535, big-endian sample order)."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DimensionError(f"image must be 2-D, got ndim={arr.ndim}")
    values = np.rint(arr).astype(np.int64)
    if (values < 0).any() or (values > MAX_PIXEL).any():
        raise FormatError(
            f"image values must lie in [0, {MAX_PIXEL}], "
            f"got range [{arr.min()}, {arr.max()}]"
        )
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, MAX_PIXEL))
        fh.write(values.astype(">u2").tobytes())


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Write a label plane as an 8-bit binary PGM; labels must be in {0,1,2}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got ndim={arr.ndim}")
    bad = np.setdiff1d(np.unique(arr), [0, 1, 2])
    if bad.size:
        raise FormatError(f"mask contains values outside {{0,1,2}}: {bad.tolist()}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.astype(np.uint8).tobytes())


def _parse_pgm(path) -> tuple[int, int, int, np.ndarray, int]:
    """Parse a binary PGM: (width, height, maxval, pixels, data offset)."""
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def next_token(what: str) -> tuple[int, bytes]:
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                newline = data.find(b"\n", pos)
                if newline < 0:
                    raise FormatError(f"{path}: unterminated comment at byte {pos}")
                pos = newline + 1
            else:
                break
        if pos >= len(data):
            raise FormatError(f"{path}: header ended early at byte {pos}, expected {what}")
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return start, data[start:pos]

    def next_int(what: str) -> int:
        offset, token = next_token(what)
        try:
            return int(token)
        except ValueError:
            raise FormatError(
                f"{path}: expected integer {what} at byte {offset}, got {token!r}"
            ) from None

    offset, magic = next_token("magic number")
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r} at byte {offset})")
    width = next_int("width")
    height = next_int("height")
    maxval = next_int("maxval")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: non-positive dimensions {width}x{height}")
    if pos >= len(data):
        raise FormatError(f"{path}: missing pixel data after header at byte {pos}")
    pos += 1  # single whitespace byte separating header from raster
    bytes_per = 2 if maxval > 255 else 1
    need = width * height * bytes_per
    if len(data) - pos < need:
        raise FormatError(
            f"{path}: pixel data truncated at byte {len(data)}; "
            f"need {need} bytes from offset {pos}"
        )
    dtype = ">u2" if bytes_per == 2 else np.uint8
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return width, height, maxval, pixels.reshape(height, width), pos


def read_pgm16(path) -> np.ndarray:
    """Read a 16-bit PGM written by :func:`write_pgm16` into a uint16 array."""
    width, height, maxval, pixels, _ = _parse_pgm(path)
    if maxval != MAX_PIXEL:
        raise FormatError(f"{path}: expected maxval {MAX_PIXEL}, got {maxval}")
    return pixels.astype(np.uint16)


def read_mask_pgm(path) -> np.ndarray:
    """Read an 8-bit label PGM, enforcing the {0,1,2} label domain."""
    width, height, maxval, pixels, data_start = _parse_pgm(path)
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255 for a mask, got {maxval}")
    flat = pixels.reshape(-1)
    bad = np.nonzero(flat > 2)[0]
    if bad.size:
        index = int(bad[0])
        raise FormatError(
            f"{path}: mask value {int(flat[index])} outside {{0,1,2}} "
            f"at byte {data_start + index}"
        )
    return pixels.astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset directories


def _image_rel(source_id: str) -> str:
    return f"images/{source_id}.pgm"


def _mask_rel(source_id: str) -> str:
    return f"masks/{source_id}.pgm"


def save_dataset(
    root,
    samples: Iterable[SegmentationSample],
    splits: dict[str, str] | None = None,
    provenance: dict[str, str] | None = None,
) -> DatasetManifest:
    """Write samples and a manifest under ``root`` in the standard layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for sample in samples:
        image_rel = _image_rel(sample.source_id)
        mask_rel = _mask_rel(sample.source_id)
        write_pgm16(root / PurePosixPath(image_rel), sample.image)
        write_mask_pgm(root / PurePosixPath(mask_rel), sample.mask)
        rows.append(
            ManifestRow(
                source_id=sample.source_id,
                image=image_rel,
                mask=mask_rel,
                body_part=sample.body_part,
                split=(splits or {}).get(sample.source_id, ""),
                provenance=(provenance or {}).get(sample.source_id, ""),
            )
        )
    manifest = DatasetManifest(rows)
    manifest.save(root / "manifest.csv")
    return manifest


def load_sample(root, row: ManifestRow) -> SegmentationSample:
    root = Path(root)
    image = read_pgm16(root / PurePosixPath(row.image)).astype(np.float64)
    mask = read_mask_pgm(root / PurePosixPath(row.mask))
    if image.shape != mask.shape:
        raise FormatError(
            f"image/mask shape mismatch for {row.source_id!r}: "
            f"{image.shape} vs {mask.shape}"
        )
    return SegmentationSample(row.source_id, image, mask, row.body_part)


def load_dataset(root, split: str | None = None) -> list[SegmentationSample]:
    """Load all samples under ``root``, optionally only one effective split."""
    root = Path(root)
    manifest = load_manifest(root / "manifest.csv")
    rows = manifest.rows if split is None else manifest.by_split(split)
    return [load_sample(root, row) for row in rows]


# ---------------------------------------------------------------------------
# splitting


def assign_splits(
    labelled_ids: Sequence[tuple[str, str]],
    seed: int,
    train_fraction: float = 0.72,
    val_fraction: float = 0.14,
) -> dict[str, str]:
    """Assign train/val/test to (id, body_part) pairs.

    Body-part classes with a single sample go entirely to test.  The rest
    split ``train_fraction`` / ``val_fraction`` / remainder, with rounding in
    favour of test, under the constraint that every multi-sample class lands
    at least once in val and at least once in test.
    """
    n = len(labelled_ids)
    if n < 3:
        raise SplitError(f"need at least 3 samples to split, got {n}")
    ids = [sid for sid, _ in labelled_ids]
    if len(set(ids)) != n:
        raise SplitError("sample ids must be unique")
    n_train = int(np.floor(train_fraction * n))
    n_val = int(np.floor(val_fraction * n))
    n_test = n - n_train - n_val

    by_class: dict[str, list[str]] = {}
    for sid, part in labelled_ids:
        by_class.setdefault(part, []).append(sid)
    for members in by_class.values():
        members.sort()
    singles = sorted(part for part, members in by_class.items() if len(members) == 1)
    multis = sorted(part for part, members in by_class.items() if len(members) > 1)

    if n_val < len(multis):
        raise SplitError(
            f"validation quota {n_val} cannot cover one sample from each of "
            f"{len(multis)} multi-sample classes: {', '.join(multis)}"
        )
    if n_test < len(multis) + len(singles):
        raise SplitError(
            f"test quota {n_test} cannot cover {len(singles)} singleton "
            f"class(es) plus one sample from each of {len(multis)} multi-sample "
            f"classes: {', '.join(multis + singles)}"
        )

    rng = np.random.default_rng(seed)
    out: dict[str, str] = {}
    pool: list[str] = []
    for part in singles:
        out[by_class[part][0]] = "test"
    for part in multis:
        members = by_class[part]
        reserved = rng.choice(len(members), size=2, replace=False)
        out[members[reserved[0]]] = "val"
        out[members[reserved[1]]] = "test"
        pool.extend(m for i, m in enumerate(members) if i not in set(reserved))

    pool.sort()
    rng.shuffle(pool)
    need_val = n_val - len(multis)
    need_test = n_test - len(multis) - len(singles)
    for sid in pool[:need_val]:
        out[sid] = "val"
    for sid in pool[need_val : need_val + need_test]:
        out[sid] = "test"
    for sid in pool[need_val + need_test :]:
        out[sid] = "train"
    return out


def split_dataset(samples: Sequence[SegmentationSample], seed: int) -> DatasetManifest:
    """Build a manifest for ``samples`` with splits assigned by body part."""
    chosen = assign_splits([(s.source_id, s.body_part) for s in samples], seed)
    rows = [
        ManifestRow(
            source_id=s.source_id,
            image=_image_rel(s.source_id),
            mask=_mask_rel(s.source_id),
            body_part=s.body_part,
            split=chosen[s.source_id],
        )
        for s in samples
    ]
    return DatasetManifest(rows)


# ---------------------------------------------------------------------------
# phantom synthesis

PHANTOM_PROFILES = ("limb", "joint", "implant")

# Noiseless per-region intensity windows.  The windows are disjoint even
# after the shading field (>= 0.85x) is applied, so region ordering survives
# shading: implant < bone < soft tissue < open beam.
_OPEN_RANGE = (0.88, 0.96)
_TISSUE_RANGE = (0.50, 0.62)
_BONE_RANGE = (0.18, 0.30)
_IMPLANT_RANGE = (0.03, 0.10)


def _unit_grid(size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    return np.meshgrid(ys, xs, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0) -> np.ndarray:
    dy = yy - cy
    dx = xx - cx
    if theta:
        cos, sin = np.cos(theta), np.sin(theta)
        dy, dx = cos * dy - sin * dx, sin * dy + cos * dx
    return (dy / ry) ** 2 + (dx / rx) ** 2 <= 1.0


def _capsule(yy, xx, y0, x0, y1, x1, radius) -> np.ndarray:
    """Points within ``radius`` of the segment (y0,x0)-(y1,x1)."""
    sy, sx = y1 - y0, x1 - x0
    length_sq = sy * sy + sx * sx
    t = ((yy - y0) * sy + (xx - x0) * sx) / max(length_sq, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    dy = yy - (y0 + t * sy)
    dx = xx - (x0 + t * sx)
    return dy * dy + dx * dx <= radius * radius


def phantom_regions(
    seed: int, class_profile: str, size: tuple[int, int] = (200, 200)
) -> dict[str, np.ndarray]:
    """Boolean region planes for one phantom: keys tissue, bone, implant.

    The same seed always produces the same geometry; the sample mask built by
    :func:`synthesize_phantom` is exactly these regions painted in label
    order (tissue, then bone, then implant).
    """
    if class_profile not in PHANTOM_PROFILES:
        raise LabelDomainError(
            f"unknown phantom profile {class_profile!r}; expected one of "
            f"{PHANTOM_PROFILES}"
        )
    yy, xx = _unit_grid(size)
    rng = np.random.default_rng([seed, PHANTOM_PROFILES.index(class_profile)])
    h, w = size
    implant = np.zeros((h, w), dtype=bool)

    if class_profile in ("limb", "implant"):
        cy = rng.uniform(0.46, 0.54)
        cx = rng.uniform(0.46, 0.54)
        ry = rng.uniform(0.34, 0.44)
        rx = rng.uniform(0.28, 0.36)
        theta = rng.uniform(-0.45, 0.45)
        tissue = _ellipse(yy, xx, cy, cx, ry, rx, theta)
        n_bones = int(rng.integers(1, 3))
        bone = np.zeros((h, w), dtype=bool)
        offsets = (0.0,) if n_bones == 1 else (-0.38, 0.38)
        for off in offsets[:n_bones]:
            bcy = cy + off * ry * np.sin(-theta) * 0.2
            bcx = cx + off * rx * np.cos(theta)
            bone |= _ellipse(
                yy, xx, bcy, bcx, 0.60 * ry, 0.25 * rx, theta
            )
        if class_profile == "implant":
            half_h = rng.uniform(0.08, 0.12)
            half_w = rng.uniform(0.025, 0.045)
            icy = cy + rng.uniform(-0.05, 0.05)
            icx = cx + rng.uniform(-0.04, 0.04)
            implant = (np.abs(yy - icy) <= half_h) & (np.abs(xx - icx) <= half_w)
    else:  # joint
        cy = rng.uniform(0.47, 0.53)
        cx = rng.uniform(0.47, 0.53)
        tissue = _ellipse(yy, xx, cy, cx, 0.46, rng.uniform(0.26, 0.32))
        jitter = rng.uniform(-0.05, 0.05)
        radius = rng.uniform(0.05, 0.075)
        upper = _capsule(yy, xx, 0.14, cx + jitter, cy - 0.04, cx + jitter * 0.3, radius)
        lower = _capsule(yy, xx, cy + 0.04, cx - jitter * 0.3, 0.86, cx - jitter, radius)
        bone = upper | lower
        # guarantee a soft-tissue rim even where the capsules run near the
        # blob boundary
        rim = rng.uniform(0.02, 0.03)
        tissue = tissue | _capsule(
            yy, xx, 0.14, cx + jitter, cy - 0.04, cx + jitter * 0.3, radius + rim
        )
        tissue = tissue | _capsule(
            yy, xx, cy + 0.04, cx - jitter * 0.3, 0.86, cx - jitter, radius + rim
        )

    return {"tissue": tissue, "bone": bone, "implant": implant}


def synthesize_phantom(
    seed: int,
    class_profile: str,
    size: tuple[int, int] = (200, 200),
    noise_std: float = 0.02,
) -> SegmentationSample:
    """Generate one synthetic X-ray phantom with an exact ground-truth mask.

    Profiles: ``limb`` (tissue ellipse with 1-2 interior bone ellipses),
    ``joint`` (two overlapping bone capsules in a tissue blob), ``implant``
    (limb plus an axis-aligned high-density rectangle, labelled bone the way
    a metal object images).  Denser regions attenuate more, so intensity
    falls from open beam through tissue to bone to implant.  A smooth
    multiplicative shading field stands in for uncorrected scatter, and
    additive Gaussian noise (standard deviation ``noise_std`` of the dynamic
    range; 0 disables it) is applied before quantisation to the 16-bit grid.
    The mask comes from the generating geometry, never from the image.
    """
    if class_profile not in PHANTOM_PROFILES:
        raise LabelDomainError(
            f"unknown phantom profile {class_profile!r}; expected one of "
            f"{PHANTOM_PROFILES}"
        )
    if noise_std < 0:
        raise LabelDomainError(f"noise_std must be >= 0, got {noise_std}")
    regions = phantom_regions(seed, class_profile, size)
    rng = np.random.default_rng([seed, PHANTOM_PROFILES.index(class_profile), 1])
    h, w = size

    intensity = np.full((h, w), rng.uniform(*_OPEN_RANGE))
    intensity[regions["tissue"]] = rng.uniform(*_TISSUE_RANGE)
    intensity[regions["bone"]] = rng.uniform(*_BONE_RANGE)
    intensity[regions["implant"]] = rng.uniform(*_IMPLANT_RANGE)

    # smooth radial falloff, multiplicative, bounded below by 0.85
    strength = rng.uniform(0.05, 0.15)
    sy = rng.uniform(0.4, 0.6)
    sx = rng.uniform(0.4, 0.6)
    yy, xx = _unit_grid(size)
    r_sq = ((yy - sy) ** 2 + (xx - sx) ** 2) / 0.5
    intensity = intensity * (1.0 - strength * np.clip(r_sq, 0.0, 1.0))

    if noise_std > 0:
        intensity = intensity + rng.normal(0.0, noise_std, size=(h, w))
    counts = np.rint(np.clip(intensity, 0.0, 1.0) * MAX_PIXEL)

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[regions["tissue"]] = 1
    mask[regions["bone"]] = 2
    mask[regions["implant"]] = 2

    return SegmentationSample(
        source_id=f"{class_profile}-{seed:06d}",
        image=counts,
        mask=mask,
        body_part=class_profile,
    )
