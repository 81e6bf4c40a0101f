"""Membership inference: a 3-layer MLP over (augmented) model outputs.

The attacker scores whether a queried output vector came from the target
model's training set. Layer sizes follow 64, 64, 1: two hidden layers and a
scalar membership head; under ``srwal`` a second head additionally predicts
which slot of the structured-random input is nonzero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .dataset import ImageSample, stack_pixels
from .incorporation import AugmentedVector, VectorTuple, input_width, make_training_input
from .nn import Adam, Dense, Relu, Sequential
from .nn.layers import DTYPE
from .target_models import SnapshotSet, softmax_ce


@dataclass
class MIConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MIConfig":
        return cls(**d)


@dataclass
class MIDataset:
    """Augmented vectors with by-construction membership labels."""

    inputs: np.ndarray        # (n, d)
    members: np.ndarray       # (n,) bool
    slot_indices: np.ndarray  # (n,) 1-based; 0 when the mode has no slot
    mode: str
    alpha: int
    m: int
    sample_ids: list[str]

    def __post_init__(self):
        n = self.inputs.shape[0]
        if not (len(self.members) == len(self.slot_indices) == len(self.sample_ids) == n):
            raise ValueError("field lengths disagree")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def balance(self) -> float:
        return float(self.members.mean())

    def record(self, i: int) -> tuple[AugmentedVector, bool]:
        slot = int(self.slot_indices[i]) or None
        return (AugmentedVector(self.inputs[i].copy(), self.mode, self.alpha, self.m,
                                slot_index=slot),
                bool(self.members[i]))


def build_mi_dataset(snapshots: SnapshotSet, member_images: list[ImageSample],
                     nonmember_images: list[ImageSample], mode: str,
                     rng: np.random.Generator) -> MIDataset:
    """Query the snapshots for both groups, build mode inputs, label by provenance."""
    overlap = {s.sample_id for s in member_images} & {s.sample_id for s in nonmember_images}
    if overlap:
        raise ValueError(f"samples appear in both member and nonmember lists: "
                         f"{sorted(overlap)[:5]}")
    if not member_images or not nonmember_images:
        raise ValueError("need at least one member and one nonmember image")

    rows: list[tuple[AugmentedVector, bool, str]] = []
    for group, is_member in ((member_images, True), (nonmember_images, False)):
        pixels = stack_pixels(group)
        outputs = np.stack([mdl.query_batch(pixels) for mdl in snapshots.snapshots])
        outputs = outputs.transpose(1, 0, 2)
        for i, s in enumerate(group):
            tup = VectorTuple(s.sample_id, s.class_label, outputs[i])
            rows.append((make_training_input(tup, mode, rng), is_member, s.sample_id))

    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    return MIDataset(
        inputs=np.stack([r[0].data for r in rows]).astype(DTYPE),
        members=np.array([r[1] for r in rows], dtype=bool),
        slot_indices=np.array([r[0].slot_index or 0 for r in rows], dtype=np.int64),
        mode=mode,
        alpha=snapshots.alpha,
        m=snapshots.final.output_dim,
        sample_ids=[r[2] for r in rows])


class MIAttacker:
    """64-64 trunk with a scalar membership head and an optional index head."""

    def __init__(self, input_dim: int, mode: str, alpha: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.mode = mode
        self.alpha = alpha
        self.trunk = Sequential([Dense(input_dim, 64, rng), Relu(),
                                 Dense(64, 64, rng), Relu()])
        self.member_head = Sequential([Dense(64, 1, rng)])
        self.index_head = Sequential([Dense(64, alpha, rng)]) if mode == "srwal" else None
        self.validation_accuracy: float | None = None

    def modules(self) -> list[Sequential]:
        mods = [self.trunk, self.member_head]
        if self.index_head is not None:
            mods.append(self.index_head)
        return mods

    def forward(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """(membership logits (n,1), index logits (n,alpha) or None)."""
        h = self.trunk.forward(v.astype(DTYPE), train=False)
        logits = self.member_head.forward(h, train=False)
        idx = self.index_head.forward(h, train=False) if self.index_head else None
        return logits, idx

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in zip(["trunk", "member_head", "index_head"], self.modules()):
            for k, v in mod.state_dict().items():
                out[f"{name}.{k}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, mod in zip(["trunk", "member_head", "index_head"], self.modules()):
            prefix = name + "."
            mod.load_state_dict({k[len(prefix):]: v for k, v in state.items()
                                 if k.startswith(prefix)})


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def train_mi(dataset: MIDataset, mode: str, config: MIConfig) -> MIAttacker:
    """Binary cross-entropy on the membership head (+ index CE under srwal).

    A seeded validation split is held out; the resulting accuracy lands on
    ``attacker.validation_accuracy``.
    """
    if mode != dataset.mode:
        raise ValueError(f"dataset was built for mode {dataset.mode!r}, not {mode!r}")
    if dataset.members.all() or (~dataset.members).all():
        raise ValueError("membership training needs both member and nonmember records")

    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    order = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if dataset.members[train_idx].all() or (~dataset.members[train_idx]).all():
        raise ValueError("validation split left a single-class training set; lower val_fraction")

    x_all = dataset.inputs
    y_all = dataset.members.astype(DTYPE)
    s_all = dataset.slot_indices

    attacker = MIAttacker(x_all.shape[1], mode, dataset.alpha, rng)
    opt = Adam(attacker.modules(), lr=config.learning_rate)
    for _ in range(config.epochs):
        ep_order = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(ep_order), config.batch_size):
            idx = ep_order[start:start + config.batch_size]
            b = len(idx)
            opt.zero_grads()
            h = attacker.trunk.forward(x_all[idx], train=True, rng=rng)
            logits = attacker.member_head.forward(h, train=True)
            p = _sigmoid(logits[:, 0])
            grad_logit = ((p - y_all[idx]) / b)[:, None]
            grad_h = attacker.member_head.backward(grad_logit)
            if attacker.index_head is not None:
                idx_logits = attacker.index_head.forward(h, train=True)
                _, grad_idx = softmax_ce(idx_logits, s_all[idx] - 1)
                grad_h = grad_h + attacker.index_head.backward(grad_idx)
            attacker.trunk.backward(grad_h)
            opt.step()

    scores = infer_membership_batch(attacker, x_all[val_idx])
    attacker.validation_accuracy = float(np.mean((scores >= 0.5) == dataset.members[val_idx]))
    return attacker


def infer_membership(attacker: MIAttacker, aug: AugmentedVector) -> float:
    """Deterministic membership probability for one input; decide at 0.5."""
    if aug.data.shape[0] != attacker.input_dim:
        raise ValueError(f"input width {aug.data.shape[0]} does not match attacker "
                         f"input {attacker.input_dim}")
    return float(infer_membership_batch(attacker, aug.data[None])[0])


def infer_membership_batch(attacker: MIAttacker, inputs: np.ndarray) -> np.ndarray:
    logits, _ = attacker.forward(inputs)
    return np.clip(_sigmoid(logits[:, 0]), 1e-12, 1.0 - 1e-12)


def predict_index_batch(attacker: MIAttacker, inputs: np.ndarray) -> np.ndarray:
    """1-based argmax of the index head (srwal attackers only)."""
    if attacker.index_head is None:
        raise ValueError("this attacker has no index head")
    _, idx_logits = attacker.forward(inputs)
    return idx_logits.argmax(axis=1) + 1


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_mi_dataset(dataset: MIDataset, path: str | Path) -> Path:
    path = Path(path)
    np.savez(path, inputs=dataset.inputs, members=dataset.members,
             slot_indices=dataset.slot_indices,
             sample_ids=np.array(dataset.sample_ids),
             meta=np.array([dataset.mode, str(dataset.alpha), str(dataset.m)]))
    return path


def load_mi_dataset(path: str | Path) -> MIDataset:
    with np.load(path, allow_pickle=False) as zf:
        mode, alpha, m = (str(v) for v in zf["meta"])
        return MIDataset(inputs=zf["inputs"], members=zf["members"],
                         slot_indices=zf["slot_indices"], mode=mode,
                         alpha=int(alpha), m=int(m),
                         sample_ids=[str(s) for s in zf["sample_ids"]])


def save_mi_attacker(attacker: MIAttacker, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"input_dim": attacker.input_dim, "mode": attacker.mode, "alpha": attacker.alpha,
            "validation_accuracy": attacker.validation_accuracy}
    with open(out_dir / "mi_attacker.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    np.savez(out_dir / "mi_attacker.npz", **attacker.state_dict())
    return out_dir


def load_mi_attacker(in_dir: str | Path) -> MIAttacker:
    in_dir = Path(in_dir)
    with open(in_dir / "mi_attacker.json") as fh:
        meta = json.load(fh)
    attacker = MIAttacker(meta["input_dim"], meta["mode"], meta["alpha"],
                          np.random.default_rng(0))
    with np.load(in_dir / "mi_attacker.npz") as zf:
        attacker.load_state_dict({k: zf[k] for k in zf.files})
    attacker.validation_accuracy = meta.get("validation_accuracy")
    return attacker
