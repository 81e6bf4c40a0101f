"""Multi-model vector banks and attack-model input construction.

Querying every snapshot with every probe image yields a bank of
:class:`VectorTuple`; the four incorporation methods turn a tuple into the
vector actually fed to an attack model:

* ``rand``   - one uniformly sampled model's output, width ``m``;
* ``concat`` - all outputs concatenated, width ``alpha * m``;
* ``sr``     - width ``alpha * m``, one sampled slot filled, the rest exactly zero;
* ``srwal``  - same layout as ``sr``, but the attack model is additionally
  trained to predict the filled slot's index.

Slot indices are 1-based (slot ``alpha`` belongs to the final model).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ImageSample, stack_pixels
from .target_models import SnapshotSet

MODES = ("rand", "concat", "sr", "srwal")


@dataclass(frozen=True)
class VectorTuple:
    """All snapshot outputs for one probe image, in snapshot order."""

    sample_id: str
    class_label: int
    vectors: np.ndarray  # (alpha, m)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be an (alpha, m) array")

    @property
    def alpha(self) -> int:
        return self.vectors.shape[0]

    @property
    def m(self) -> int:
        return self.vectors.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.vectors[-1]


@dataclass(frozen=True)
class AugmentedVector:
    """Attack-model input plus the slot bookkeeping the SR methods rely on."""

    data: np.ndarray
    mode: str
    alpha: int
    m: int
    slot_index: int | None = None  # 1-based model index, when applicable

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "rand":
            if self.data.shape != (self.m,):
                raise ValueError("rand vectors must have width m")
        else:
            if self.data.shape != (self.alpha * self.m,):
                raise ValueError("augmented vectors must have width alpha*m")
        if self.mode == "concat" and self.slot_index is not None:
            raise ValueError("concat vectors carry no slot index")
        if self.mode in ("sr", "srwal"):
            if self.slot_index is None or not 1 <= self.slot_index <= self.alpha:
                raise ValueError(f"slot_index must be in [1, {self.alpha}]")
            lo, hi = (self.slot_index - 1) * self.m, self.slot_index * self.m
            outside = np.abs(self.data[:lo]).sum() + np.abs(self.data[hi:]).sum()
            if outside != 0.0:
                raise ValueError("sr/srwal vectors must be exactly zero outside their slot")

    def slot(self, i: int) -> np.ndarray:
        """The i-th (1-based) m-wide block of an alpha*m vector."""
        if self.mode == "rand":
            raise ValueError("rand vectors have no slot structure")
        return self.data[(i - 1) * self.m: i * self.m]


def build_vector_bank(snapshots: SnapshotSet, probe: list[ImageSample]) -> list[VectorTuple]:
    """Query every snapshot with every probe image, in probe order."""
    if not probe:
        raise ValueError("probe set is empty")
    pixels = stack_pixels(probe)
    outputs = np.stack([model.query_batch(pixels) for model in snapshots.snapshots])  # (a, n, m)
    outputs = outputs.transpose(1, 0, 2)  # (n, alpha, m)
    return [VectorTuple(s.sample_id, s.class_label, outputs[i].copy())
            for i, s in enumerate(probe)]


def make_rand(tup: VectorTuple, rng: np.random.Generator) -> AugmentedVector:
    """One snapshot's output, chosen uniformly (probability 1/alpha)."""
    i = int(rng.integers(1, tup.alpha + 1))
    return AugmentedVector(tup.vectors[i - 1].copy(), "rand", tup.alpha, tup.m, slot_index=i)


def make_concat(tup: VectorTuple) -> AugmentedVector:
    """All snapshot outputs concatenated in order."""
    return AugmentedVector(tup.vectors.reshape(-1).copy(), "concat", tup.alpha, tup.m)


def make_structured_random(tup: VectorTuple, rng: np.random.Generator,
                           with_label: bool = False) -> AugmentedVector:
    """Uniformly sampled slot filled with that model's output, zeros elsewhere."""
    i = int(rng.integers(1, tup.alpha + 1))
    data = np.zeros(tup.alpha * tup.m, dtype=tup.vectors.dtype)
    data[(i - 1) * tup.m: i * tup.m] = tup.vectors[i - 1]
    return AugmentedVector(data, "srwal" if with_label else "sr", tup.alpha, tup.m, slot_index=i)


def make_training_input(tup: VectorTuple, mode: str, rng: np.random.Generator) -> AugmentedVector:
    """Mode dispatch used by the attack training loops (resampled per update)."""
    if mode == "rand":
        return make_rand(tup, rng)
    if mode == "concat":
        return make_concat(tup)
    if mode == "sr":
        return make_structured_random(tup, rng, with_label=False)
    if mode == "srwal":
        return make_structured_random(tup, rng, with_label=True)
    raise ValueError(f"unknown mode {mode!r}")


def make_test_input(source: VectorTuple | np.ndarray, mode: str, models_for_test: str = "final",
                    alpha: int | None = None) -> AugmentedVector | list[AugmentedVector]:
    """Attack-model input(s) for test time, from a leaked final vector or a full tuple.

    ``rand`` always consumes the final model's vector unchanged. The
    alpha*m modes place a lone final vector in slot ``alpha`` (the leak comes
    from the final model); with ``models_for_test="all"`` and a full tuple,
    ``concat`` concatenates everything while ``sr``/``srwal`` return one input
    per slot, whose generator outputs the caller averages.
    """
    if models_for_test not in ("final", "all"):
        raise ValueError(f"models_for_test must be 'final' or 'all', got {models_for_test!r}")
    if isinstance(source, VectorTuple):
        tup, final, a, m = source, source.final, source.alpha, source.m
    else:
        tup = None
        final = np.asarray(source)
        if alpha is None:
            raise ValueError("alpha is required when only the final vector is given")
        a, m = alpha, final.shape[0]
    if models_for_test == "all" and mode != "rand" and tup is None:
        raise ValueError("models_for_test='all' needs the full VectorTuple")

    if mode == "rand":
        return AugmentedVector(final.copy(), "rand", a, m, slot_index=a)
    if mode == "concat":
        if models_for_test == "all":
            return make_concat(tup)
        data = np.zeros(a * m, dtype=final.dtype)
        data[(a - 1) * m:] = final
        return AugmentedVector(data, "concat", a, m)
    if mode in ("sr", "srwal"):
        if models_for_test == "final":
            data = np.zeros(a * m, dtype=final.dtype)
            data[(a - 1) * m:] = final
            return AugmentedVector(data, mode, a, m, slot_index=a)
        out = []
        for i in range(1, a + 1):
            data = np.zeros(a * m, dtype=final.dtype)
            data[(i - 1) * m: i * m] = tup.vectors[i - 1]
            out.append(AugmentedVector(data, mode, a, m, slot_index=i))
        return out
    raise ValueError(f"unknown mode {mode!r}")


def input_width(mode: str, alpha: int, m: int) -> int:
    return m if mode == "rand" else alpha * m


def save_bank(bank: list[VectorTuple], path: str | Path) -> Path:
    path = Path(path)
    if not bank:
        raise ValueError("empty bank")
    np.savez(path,
             sample_ids=np.array([t.sample_id for t in bank]),
             class_labels=np.array([t.class_label for t in bank], dtype=np.int64),
             vectors=np.stack([t.vectors for t in bank]))
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_bank(path: str | Path) -> list[VectorTuple]:
    with np.load(path, allow_pickle=False) as zf:
        ids = zf["sample_ids"]
        labels = zf["class_labels"]
        vectors = zf["vectors"]
    return [VectorTuple(str(ids[i]), int(labels[i]), vectors[i].copy())
            for i in range(len(ids))]
