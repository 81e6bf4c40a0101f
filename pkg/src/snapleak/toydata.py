"""Synthetic texture-per-class corpora for desk-scale experiments.

Each class is a fixed superposition of oriented sinusoidal gratings plus a
class-specific Gaussian bump; samples within a class vary by a small random
translation, contrast jitter and pixel noise. The textures are easy for a
small CNN to separate while leaving enough within-class variation that
held-out samples behave like fresh readings of the same "biometric".
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import DatasetDescriptor, ImageSample

DTYPE = np.float64


def make_texture_corpus(n_classes: int = 24, n_per_class: int = 30, size: int = 32,
                        channels: int = 1, noise: float = 0.04, shift: float = 2.0,
                        contrast_jitter: float = 0.15, seed: int = 0,
                        id_prefix: str = "toy") -> list[ImageSample]:
    """Generate a seeded corpus of ``n_classes * n_per_class`` ImageSamples."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size, dtype=DTYPE), np.arange(size, dtype=DTYPE),
                         indexing="ij")
    samples: list[ImageSample] = []
    n_waves = 3
    for c in range(n_classes):
        freqs = rng.uniform(1.5, 6.0, size=(n_waves,)) / size
        angles = rng.uniform(0, np.pi, size=(n_waves,))
        phases = rng.uniform(0, 2 * np.pi, size=(n_waves,))
        amps = rng.uniform(0.5, 1.0, size=(n_waves,))
        fx = freqs * np.cos(angles)
        fy = freqs * np.sin(angles)
        bump_pos = rng.uniform(0.25 * size, 0.75 * size, size=2)
        bump_sign = rng.choice([-1.0, 1.0])
        bump_width = rng.uniform(0.15 * size, 0.3 * size)

        for j in range(n_per_class):
            dx, dy = rng.uniform(-shift, shift, size=2)
            contrast = 1.0 + rng.uniform(-contrast_jitter, contrast_jitter)
            img = np.zeros((size, size), dtype=DTYPE)
            for w in range(n_waves):
                img += amps[w] * np.sin(2 * np.pi * (fx[w] * (xx + dx) + fy[w] * (yy + dy))
                                        + phases[w])
            r2 = (xx + dx - bump_pos[1]) ** 2 + (yy + dy - bump_pos[0]) ** 2
            img += bump_sign * 1.5 * np.exp(-r2 / (2 * bump_width ** 2))
            img = 0.5 + 0.5 * contrast * img / (n_waves + 1.5)
            img = img[:, :, None]
            if channels == 3:
                mix = rng.uniform(0.9, 1.1, size=3)
                img = np.clip(img * mix[None, None, :], 0.0, 1.0)
            img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)
            samples.append(ImageSample(sample_id=f"{id_prefix}/c{c:03d}/i{j:03d}",
                                       class_label=c, pixels=img))
    return samples


def write_corpus(samples: list[ImageSample], out_dir: str | Path,
                 manifest_name: str = "manifest.txt") -> Path:
    """Write samples as PNGs plus a manifest and descriptor, for `load_corpus`.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("no samples to write")
    h, w, c = samples[0].pixels.shape
    DatasetDescriptor(height=h, width=w, channels=c).save(out_dir / "descriptor.json")
    lines = []
    for s in sorted(samples, key=lambda s: s.sample_id):
        rel = s.sample_id.replace("/", "_").replace("#", "_") + ".png"
        arr = np.clip(np.round(s.pixels * 255.0), 0, 255).astype(np.uint8)
        img = Image.fromarray(arr[:, :, 0] if c == 1 else arr, mode="L" if c == 1 else "RGB")
        img.save(out_dir / rel)
        lines.append(f"{rel} {s.class_label}")
    manifest = out_dir / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
