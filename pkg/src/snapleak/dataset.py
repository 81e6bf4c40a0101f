"""Image corpus ingestion, train/probe splits and the crafted-blur transform.

A corpus is a list of :class:`ImageSample` loaded from a plain-text manifest
(one ``<image-path> <integer-label>`` record per line) plus a JSON descriptor
fixing the image geometry. Two split regimes are supported: class-disjoint
probe splits for feature-extraction targets and per-class holdout splits for
classification targets. Both are seeded and reproduce bit-exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

DTYPE = np.float64


class IngestError(Exception):
    """Fatal problem while loading a corpus (missing file, bad record, ...)."""


@dataclass(frozen=True)
class DatasetDescriptor:
    """Target geometry every loaded sample must match."""

    height: int
    width: int
    channels: int
    crop: str = "none"  # none | center | resize

    def __post_init__(self):
        if self.crop not in ("none", "center", "resize"):
            raise ValueError(f"unknown crop rule {self.crop!r}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (grayscale) or 3 (RGB)")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetDescriptor":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(height=int(raw["height"]), width=int(raw["width"]),
                   channels=int(raw["channels"]), crop=raw.get("crop", "none"))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({"height": self.height, "width": self.width,
                       "channels": self.channels, "crop": self.crop}, fh, indent=2)


@dataclass(frozen=True)
class ImageSample:
    """One image with class label, pixel array in [0,1] and provenance tag."""

    sample_id: str
    class_label: int
    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]
    origin: str = "natural"  # natural | crafted_blur

    def __post_init__(self):
        if self.class_label < 0:
            raise ValueError("class_label must be >= 0")
        if self.origin not in ("natural", "crafted_blur"):
            raise ValueError(f"unknown origin {self.origin!r}")
        px = self.pixels
        if px.ndim != 3:
            raise ValueError(f"pixels must be (H, W, C), got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class DatasetSplit:
    """Target-model training set plus the attacker's probe set."""

    target_train: list[ImageSample]
    probe: list[ImageSample]
    regime: str  # feature_extraction | classification
    excluded: list[str] = field(default_factory=list)  # sample ids dropped (singleton classes)

    def __post_init__(self):
        if self.regime not in ("feature_extraction", "classification"):
            raise ValueError(f"unknown regime {self.regime!r}")
        train_classes = {s.class_label for s in self.target_train}
        probe_classes = {s.class_label for s in self.probe}
        if self.regime == "feature_extraction":
            if train_classes & probe_classes:
                raise ValueError("feature_extraction split must be class-disjoint")
        else:
            if not probe_classes <= train_classes:
                raise ValueError("classification probe classes must appear in target_train")
            overlap = {s.sample_id for s in self.target_train} & {s.sample_id for s in self.probe}
            if overlap:
                raise ValueError(f"sample ids appear in both lists: {sorted(overlap)[:5]}")

    @property
    def train_classes(self) -> list[int]:
        return sorted({s.class_label for s in self.target_train})

    @property
    def probe_classes(self) -> list[int]:
        return sorted({s.class_label for s in self.probe})


def _load_pixels(path: Path, desc: DatasetDescriptor) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L" if desc.channels == 1 else "RGB")
        if desc.crop == "center":
            w, h = img.size
            if w < desc.width or h < desc.height:
                img = img.resize((max(w, desc.width), max(h, desc.height)), Image.BILINEAR)
                w, h = img.size
            left = (w - desc.width) // 2
            top = (h - desc.height) // 2
            img = img.crop((left, top, left + desc.width, top + desc.height))
        elif desc.crop == "resize":
            img = img.resize((desc.width, desc.height), Image.BILINEAR)
        arr = np.asarray(img, dtype=DTYPE) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape != (desc.height, desc.width, desc.channels):
        raise IngestError(f"{path}: decoded shape {arr.shape} does not match descriptor "
                          f"({desc.height}, {desc.width}, {desc.channels})")
    return arr


def load_corpus(manifest_path: str | Path,
                descriptor_path: str | Path | None = None) -> list[ImageSample]:
    """Load every (path, label) record of a manifest into ImageSamples.

    The descriptor defaults to ``descriptor.json`` next to the manifest.
    Image paths are resolved relative to the manifest's directory and double
    as sample ids. Samples come back sorted by sample_id.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IngestError(f"manifest not found: {manifest_path}")
    if descriptor_path is None:
        descriptor_path = manifest_path.parent / "descriptor.json"
    if not Path(descriptor_path).exists():
        raise IngestError(f"dataset descriptor not found: {descriptor_path}")
    desc = DatasetDescriptor.load(descriptor_path)

    records: list[tuple[str, int]] = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(maxsplit=1)
        if len(parts) != 2:
            raise IngestError(f"{manifest_path}:{lineno}: expected '<path> <label>', got {line!r}")
        try:
            label = int(parts[1])
        except ValueError as exc:
            raise IngestError(f"{manifest_path}:{lineno}: label {parts[1]!r} is not an integer") from exc
        if label < 0:
            raise IngestError(f"{manifest_path}:{lineno}: labels must be >= 0")
        records.append((parts[0], label))

    if not records:
        warnings.warn(f"manifest {manifest_path} is empty; returning empty corpus")
        return []

    root = manifest_path.parent
    samples = []
    seen: set[str] = set()
    for rel, label in records:
        img_path = root / rel
        if not img_path.exists():
            raise IngestError(f"image file not found: {img_path}")
        if rel in seen:
            raise IngestError(f"duplicate sample id in manifest: {rel}")
        seen.add(rel)
        samples.append(ImageSample(sample_id=rel, class_label=label,
                                   pixels=_load_pixels(img_path, desc)))

    labels = sorted({s.class_label for s in samples})
    gaps = sorted(set(range(labels[0], labels[-1] + 1)) - set(labels))
    if gaps:
        warnings.warn(f"label gaps in corpus (missing {gaps[:10]}{'...' if len(gaps) > 10 else ''})")
    samples.sort(key=lambda s: s.sample_id)
    return samples


def _by_class(corpus: list[ImageSample]) -> dict[int, list[ImageSample]]:
    groups: dict[int, list[ImageSample]] = {}
    for s in sorted(corpus, key=lambda s: s.sample_id):
        groups.setdefault(s.class_label, []).append(s)
    return groups


def split_feature_extraction(corpus: list[ImageSample], probe_class_count: int,
                             probe_size: int, seed: int) -> DatasetSplit:
    """Carve out a class-disjoint probe set of ``probe_size`` images.

    ``probe_class_count`` classes are chosen uniformly (seeded); their samples
    form the probe pool, truncated deterministically to ``probe_size``. All
    remaining classes train the target model.
    """
    groups = _by_class(corpus)
    classes = sorted(groups)
    if probe_class_count >= len(classes):
        raise ValueError(f"probe_class_count={probe_class_count} would leave no target_train "
                         f"classes (corpus has {len(classes)})")
    rng = np.random.default_rng(seed)
    probe_classes = sorted(rng.choice(classes, size=probe_class_count, replace=False).tolist())
    pool = [s for c in probe_classes for s in groups[c]]
    if len(pool) < probe_size:
        raise ValueError(f"probe_size={probe_size} unreachable: chosen classes hold only "
                         f"{len(pool)} images; pick a smaller probe_size")
    # round-robin over classes so truncation keeps every probe class populated
    order: list[ImageSample] = []
    queues = [list(groups[c]) for c in probe_classes]
    while any(queues):
        for q in queues:
            if q:
                order.append(q.pop(0))
    probe = order[:probe_size]
    train = [s for c in classes if c not in set(probe_classes) for s in groups[c]]
    return DatasetSplit(target_train=train, probe=probe, regime="feature_extraction")


def split_classification(corpus: list[ImageSample], holdout_fraction: float,
                         seed: int) -> DatasetSplit:
    """Per class, hold out ceil(fraction * count) images as the probe set.

    Classes with a single sample cannot be split; they are excluded from both
    sides and reported in ``split.excluded``.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in (0, 1)")
    groups = _by_class(corpus)
    rng = np.random.default_rng(seed)
    train: list[ImageSample] = []
    probe: list[ImageSample] = []
    excluded: list[str] = []
    for c in sorted(groups):
        members = groups[c]
        if len(members) < 2:
            warnings.warn(f"class {c} has a single sample; excluded from the split")
            excluded.extend(s.sample_id for s in members)
            continue
        k = int(np.ceil(holdout_fraction * len(members)))
        k = min(k, len(members) - 1)  # keep at least one training sample
        picked = rng.choice(len(members), size=k, replace=False)
        picked_set = set(picked.tolist())
        for i, s in enumerate(members):
            (probe if i in picked_set else train).append(s)
    return DatasetSplit(target_train=train, probe=probe, regime="classification",
                        excluded=excluded)


def gaussian_kernel2d(kernel_size: int = 3, sigma: float = 0.8) -> np.ndarray:
    """Normalized isotropic Gaussian kernel on the integer grid."""
    if kernel_size % 2 != 1:
        raise ValueError("kernel_size must be odd")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    half = kernel_size // 2
    ax = np.arange(-half, half + 1, dtype=DTYPE)
    dx, dy = np.meshgrid(ax, ax)
    k = np.exp(-(dx ** 2 + dy ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(pixels: np.ndarray, kernel_size: int = 3, sigma: float = 0.8) -> np.ndarray:
    """Per-channel Gaussian blur with edge-inclusive reflection padding.

    The kernel is normalized, so constant images pass through unchanged.
    Output is clamped to [0, 1].
    """
    kernel = gaussian_kernel2d(kernel_size, sigma)
    half = kernel_size // 2
    if pixels.ndim != 3:
        raise ValueError(f"pixels must be (H, W, C), got shape {pixels.shape}")
    padded = np.pad(pixels, ((half, half), (half, half), (0, 0)), mode="symmetric")
    out = np.zeros_like(pixels)
    for dy in range(kernel_size):
        for dx in range(kernel_size):
            out += kernel[dy, dx] * padded[dy:dy + pixels.shape[0], dx:dx + pixels.shape[1], :]
    return np.clip(out, 0.0, 1.0)


def blur_sample(sample: ImageSample, new_class_label: int | None = None,
                kernel_size: int = 3, sigma: float = 0.8) -> ImageSample:
    """Blurred copy of a sample, tagged ``crafted_blur`` (update-scenario crafting)."""
    return replace(sample,
                   sample_id=f"{sample.sample_id}#blur",
                   class_label=sample.class_label if new_class_label is None else new_class_label,
                   pixels=gaussian_blur(sample.pixels, kernel_size, sigma),
                   origin="crafted_blur")


def stack_pixels(samples: list[ImageSample]) -> np.ndarray:
    """(N, H, W, C) batch array from a list of samples."""
    if not samples:
        raise ValueError("no samples to stack")
    return np.stack([s.pixels for s in samples]).astype(DTYPE)
