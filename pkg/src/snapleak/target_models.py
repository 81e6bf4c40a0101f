"""Target networks, snapshot capture under three leakage scenarios, and queries.

Two kinds of targets exist. Feature extractors map an image to an
``m``-dimensional embedding and are trained with a multiplicative
angular-margin softmax over the training classes (the class-weight head is
training-only state and never part of a query). Classifiers map an image to a
softmax vector over a fixed class set.

A training run captures deep-copied snapshots at scheduled fractions of the
epoch budget; scenario helpers build the snapshot sequences an attacker might
obtain: checkpoints of the initial training run, fine-tuning after a crafted
class insertion, and naive retraining after class removal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataset import DatasetSplit, ImageSample, stack_pixels
from .nn import Adam, Conv2d, Dense, Dropout, Flatten, LeakyRelu, Sequential
from .nn.layers import DTYPE, he_normal


class TrainingDiverged(Exception):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass
class TrainConfig:
    """Hyperparameters for target-model training."""

    epochs: int = 40
    batch_size: int = 32
    dropout_rate: float = 0.5
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    loss: str = "angular_margin"      # angular_margin | softmax
    margin: int = 4                   # multiplicative angular margin (1 = plain normalized softmax)
    margin_lambda: float = 5.0        # blend between cos(theta) and the margin-penalized term
    embedding_dim: int = 64           # m for feature extractors
    hidden_dim: int = 128
    conv_widths: tuple[int, ...] = (24, 48, 96)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.loss not in ("angular_margin", "softmax"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.margin not in (1, 2, 3, 4):
            raise ValueError("margin must be one of 1..4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        d["conv_widths"] = tuple(d.get("conv_widths", (24, 48, 96)))
        return cls(**d)


def _build_net(image_shape: tuple[int, int, int], out_dim: int, config: TrainConfig,
               rng: np.random.Generator) -> Sequential:
    h, w, c = image_shape
    if h != w or h & (h - 1):
        raise ValueError(f"backbone expects square power-of-two images, got {h}x{w}")
    n_blocks = int(np.log2(h // 4))
    widths = config.conv_widths
    if len(widths) != n_blocks:
        raise ValueError(f"{h}x{h} input needs {n_blocks} stride-2 conv blocks, "
                         f"config gives widths for {len(widths)}")
    layers = []
    c_in = c
    for width in widths:
        layers += [Conv2d(c_in, width, k=4, rng=rng, stride=2, pad=1), LeakyRelu(0.2)]
        c_in = width
    feat = 4 * 4 * c_in
    layers += [Flatten(),
               Dense(feat, config.hidden_dim, rng), LeakyRelu(0.2),
               Dropout(config.dropout_rate),
               Dense(config.hidden_dim, out_dim, rng)]
    return Sequential(layers)


class TargetModel:
    """One network snapshot: queryable, cloneable, serializable."""

    def __init__(self, kind: str, net: Sequential, output_dim: int, backbone_id: str,
                 image_shape: tuple[int, int, int], class_labels: list[int],
                 head_w: np.ndarray | None = None, stage_tag: str = "init"):
        if kind not in ("feature_extractor", "classifier"):
            raise ValueError(f"unknown kind {kind!r}")
        self.kind = kind
        self.net = net
        self.output_dim = output_dim
        self.backbone_id = backbone_id
        self.image_shape = tuple(image_shape)
        self.class_labels = list(class_labels)  # classifier output order / margin-head classes
        self.head_w = head_w                    # (m, n_classes), feature_extractor training only
        self.stage_tag = stage_tag

    def query_batch(self, pixels: np.ndarray) -> np.ndarray:
        """Inference-mode forward pass on an (N, H, W, C) batch."""
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.shape[1:] != self.image_shape:
            raise ValueError(f"input shape {pixels.shape[1:]} does not match model "
                             f"input {self.image_shape}")
        out = self.net.forward(pixels.astype(DTYPE), train=False)
        if self.kind == "classifier":
            out = _softmax(out)
        return out

    def clone(self, stage_tag: str | None = None) -> "TargetModel":
        net = _build_like(self.net)
        net.load_state_dict(self.net.state_dict())
        return TargetModel(self.kind, net, self.output_dim, self.backbone_id,
                           self.image_shape, list(self.class_labels),
                           None if self.head_w is None else self.head_w.copy(),
                           stage_tag or self.stage_tag)


def _build_like(net: Sequential) -> Sequential:
    """Fresh Sequential with the same layer structure (params re-created, then overwritten)."""
    import copy
    return copy.deepcopy(net)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def query(model: TargetModel, image: ImageSample) -> np.ndarray:
    """Deterministic single-image query; returns the m-dimensional output vector."""
    if image.pixels.shape != model.image_shape:
        raise ValueError(f"image shape {image.pixels.shape} does not match model "
                         f"input {model.image_shape}")
    return model.query_batch(image.pixels[None])[0]


# ---------------------------------------------------------------------------
# training criteria
# ---------------------------------------------------------------------------

_CHEB = {1: (lambda c: c, lambda c: np.ones_like(c)),
         2: (lambda c: 2 * c ** 2 - 1, lambda c: 4 * c),
         3: (lambda c: 4 * c ** 3 - 3 * c, lambda c: 12 * c ** 2 - 3),
         4: (lambda c: 8 * c ** 4 - 8 * c ** 2 + 1, lambda c: 32 * c ** 3 - 16 * c)}


def softmax_ce(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    n = logits.shape[0]
    p = _softmax(logits)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), targets], 1e-300)))
    grad = p.copy()
    grad[np.arange(n), targets] -= 1.0
    return float(loss), grad / n


def angular_margin_loss(features: np.ndarray, head_w: np.ndarray, targets: np.ndarray,
                        margin: int, lam: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Multiplicative angular-margin softmax over normalized class weights.

    Non-target logits are ``||f|| cos(theta_j)``; the target logit blends
    ``cos(theta)`` with the margin-penalized ``psi(theta) = (-1)^k cos(m theta) - 2k``
    as ``(psi + lam*cos) / (1 + lam)``. Returns (loss, grad_features, grad_head).
    """
    n, m_dim = features.shape
    tm, tm_d = _CHEB[margin]

    wn = np.linalg.norm(head_w, axis=0)
    wn = np.maximum(wn, 1e-12)
    w_hat = head_w / wn
    fn = np.linalg.norm(features, axis=1)
    fn = np.maximum(fn, 1e-12)
    f_hat = features / fn[:, None]
    cos = np.clip(f_hat @ w_hat, -1.0 + 1e-12, 1.0 - 1e-12)

    idx = np.arange(n)
    c_t = cos[idx, targets]
    theta = np.arccos(c_t)
    k = np.floor(margin * theta / np.pi)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    psi = sign * tm(c_t) - 2.0 * k
    g = (psi + lam * c_t) / (1.0 + lam)
    g_prime = (sign * tm_d(c_t) + lam) / (1.0 + lam)

    logits = fn[:, None] * cos
    logits[idx, targets] = fn * g
    loss, dlogits = softmax_ce(logits, targets)

    # chain back through cos and ||f||
    dcos = dlogits * fn[:, None]
    dfn = (dlogits * cos).sum(axis=1)
    dt = dlogits[idx, targets]
    dcos[idx, targets] = dt * fn * g_prime
    dfn += dt * (g - cos[idx, targets])  # replace the non-target contribution for the target slot

    grad_f = (dcos @ w_hat.T) / fn[:, None]
    grad_f -= ((dcos * cos).sum(axis=1) / fn)[:, None] * f_hat
    grad_f += dfn[:, None] * f_hat

    dw_hat = f_hat.T @ dcos  # (m, C)
    grad_w = (dw_hat - w_hat * (w_hat * dw_hat).sum(axis=0)) / wn
    return loss, grad_f, grad_w


def linear_head_loss(features: np.ndarray, head_w: np.ndarray,
                     targets: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Plain softmax over a linear class head (margin-free fallback)."""
    loss, grad_logits = softmax_ce(features @ head_w, targets)
    return loss, grad_logits @ head_w.T, features.T @ grad_logits


def evaluate_loss(model: TargetModel, samples: list[ImageSample], config: TrainConfig) -> float:
    """Training criterion evaluated in inference mode (dropout off)."""
    x = stack_pixels(samples)
    targets = _label_indices(samples, model.class_labels)
    out = model.net.forward(x, train=False)
    if model.kind == "classifier":
        loss, _ = softmax_ce(out, targets)
    elif config.loss == "angular_margin":
        loss, _, _ = angular_margin_loss(out, model.head_w, targets,
                                         config.margin, config.margin_lambda)
    else:
        loss, _, _ = linear_head_loss(out, model.head_w, targets)
    return loss


def _label_indices(samples: list[ImageSample], class_labels: list[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(class_labels)}
    try:
        return np.array([lookup[s.class_label] for s in samples], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"sample label {exc.args[0]} unknown to this model") from exc


# ---------------------------------------------------------------------------
# snapshot sets
# ---------------------------------------------------------------------------

@dataclass
class SnapshotSet:
    """Ordered model snapshots from one scenario; the last one is the final model."""

    scenario: str                      # upslope | update | downslope
    snapshots: list[TargetModel]
    stages: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in ("upslope", "update", "downslope"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not self.snapshots:
            raise ValueError("a SnapshotSet needs at least one snapshot")
        first = self.snapshots[0]
        for s in self.snapshots:
            if (s.kind, s.output_dim, s.backbone_id) != (first.kind, first.output_dim,
                                                         first.backbone_id):
                raise ValueError("snapshots must share kind, output_dim and backbone_id")
        tags = [s.stage_tag for s in self.snapshots]
        if len(set(tags)) != len(tags):
            raise ValueError(f"stage tags must be unique, got {tags}")

    @property
    def alpha(self) -> int:
        return len(self.snapshots)

    @property
    def final_index(self) -> int:
        return len(self.snapshots)

    @property
    def final(self) -> TargetModel:
        return self.snapshots[-1]

    def subset(self, indices: list[int]) -> "SnapshotSet":
        """New set restricted to the given 0-based snapshot indices (order kept)."""
        if not indices:
            raise ValueError("snapshot subset must be nonempty")
        idx = sorted(indices)
        return SnapshotSet(self.scenario,
                           [self.snapshots[i] for i in idx],
                           [self.stages[i] for i in idx],
                           dict(self.metadata, subset=idx))


def init_target_model(kind: str, image_shape: tuple[int, int, int], class_labels: list[int],
                      config: TrainConfig, rng: np.random.Generator,
                      warm_from: TargetModel | None = None) -> TargetModel:
    """Fresh model for ``class_labels``; optionally warm-started from another model.

    Warm start copies every parameter whose shape matches (all of the trunk;
    the final layer too when the output width agrees) and re-initializes the
    rest, mirroring a generically pre-trained backbone with a new task head.
    """
    n_classes = len(class_labels)
    out_dim = config.embedding_dim if kind == "feature_extractor" else n_classes
    net = _build_net(image_shape, out_dim, config, rng)
    head = None
    if kind == "feature_extractor":
        head = he_normal(rng, (config.embedding_dim, n_classes), fan_in=config.embedding_dim)
    if warm_from is not None:
        if warm_from.kind != kind:
            raise ValueError("warm-start model kind mismatch")
        src = warm_from.net.state_dict()
        dst = net.state_dict()
        for name, arr in src.items():
            if name in dst and dst[name].shape == arr.shape:
                dst[name] = arr
        net.load_state_dict(dst)
    backbone = f"smallconv-{'/'.join(map(str, config.conv_widths))}-h{config.hidden_dim}-o{out_dim}"
    return TargetModel(kind, net, out_dim, backbone, image_shape, class_labels, head)


def _fit(model: TargetModel, samples: list[ImageSample], config: TrainConfig, epochs: int,
         snapshot_epochs: dict[int, str], rng: np.random.Generator,
         scenario: str) -> tuple[list[TargetModel], list[dict], list[float]]:
    """Train in place, deep-copying the model at the requested epoch marks."""
    x_all = stack_pixels(samples)
    t_all = _label_indices(samples, model.class_labels)
    n = len(samples)
    use_head = model.kind == "feature_extractor"

    head_box = _HeadBox(model) if use_head else None
    modules = [model.net] + ([head_box] if head_box else [])
    opt = Adam(modules, lr=config.learning_rate, betas=config.betas)

    snaps: list[TargetModel] = []
    stages: list[dict] = []
    curve: list[float] = []

    def take(epoch: int):
        if epoch in snapshot_epochs:
            tag = snapshot_epochs[epoch]
            snaps.append(model.clone(stage_tag=tag))
            stages.append({"tag": tag, "epoch": epoch, "scenario": scenario})

    take(0)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, t = x_all[idx], t_all[idx]
            opt.zero_grads()
            out = model.net.forward(x, train=True, rng=rng)
            if use_head:
                if config.loss == "angular_margin":
                    loss, grad_out, grad_head = angular_margin_loss(
                        out, model.head_w, t, config.margin, config.margin_lambda)
                else:
                    loss, grad_out, grad_head = linear_head_loss(out, model.head_w, t)
                head_box.grads["w"] += grad_head
            else:
                loss, grad_out = softmax_ce(out, t)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            model.net.backward(grad_out)
            opt.step()
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        take(epoch)
    return snaps, stages, curve


class _HeadBox:
    """Adapter exposing the margin head to the optimizer like a layer stack."""

    def __init__(self, model: TargetModel):
        self.model = model
        self.grads = {"w": np.zeros_like(model.head_w)}

    @property
    def params(self):
        return {"w": self.model.head_w}

    def param_items(self):
        yield "w", self, "w"

    def zero_grads(self):
        self.grads["w"][:] = 0.0


def train_with_snapshots(split: DatasetSplit, config: TrainConfig,
                         schedule: list[float], initial: TargetModel | None = None,
                         scenario: str = "upslope") -> SnapshotSet:
    """Train the kind-appropriate target on ``split.target_train`` with checkpoints.

    ``schedule`` lists epoch fractions in [0, 1], sorted, ending at 1.0;
    fraction 0 snapshots the initialization state (which is ``initial``'s
    weights when a warm start is given).
    """
    _check_schedule(schedule)
    kind = "feature_extractor" if split.regime == "feature_extraction" else "classifier"
    labels = sorted({s.class_label for s in split.target_train})
    if not labels:
        raise ValueError("split.target_train is empty")
    image_shape = split.target_train[0].pixels.shape
    rng = np.random.default_rng(config.seed)
    model = init_target_model(kind, image_shape, labels, config, rng, warm_from=initial)

    marks = _schedule_epochs(schedule, config.epochs, prefix=scenario)
    epochs = config.epochs if max(schedule) == 1.0 else int(round(max(schedule) * config.epochs))
    snaps, stages, curve = _fit(model, split.target_train, config, epochs, marks, rng, scenario)
    meta = {"seed": config.seed, "train_classes": labels, "schedule": list(schedule),
            "epochs": config.epochs, "warm_started": initial is not None,
            "loss_curve": curve}
    return SnapshotSet(scenario, snaps, stages, meta)


def _check_schedule(schedule: list[float]) -> None:
    if not schedule:
        raise ValueError("schedule must be nonempty")
    if any(not 0.0 <= f <= 1.0 for f in schedule):
        raise ValueError("schedule fractions must lie in [0, 1]")
    if sorted(schedule) != list(schedule) or len(set(schedule)) != len(schedule):
        raise ValueError("schedule must be strictly increasing")


def _schedule_epochs(schedule: list[float], epochs: int, prefix: str) -> dict[int, str]:
    marks: dict[int, str] = {}
    for f in schedule:
        e = int(round(f * epochs))
        if e in marks:
            raise ValueError(f"schedule fractions {schedule} collide at epoch {e}")
        marks[e] = f"{prefix}-{int(round(f * 100)):03d}pct"
    return marks


def run_update_scenario(base: SnapshotSet, split: DatasetSplit,
                        new_class_images: list[ImageSample], config: TrainConfig,
                        epochs: int = 10, snapshot_epochs: tuple[int, ...] = (0, 5, 10)) -> SnapshotSet:
    """Fine-tune the final base model after inserting one crafted class.

    The new images must all carry one fresh class label and the
    ``crafted_blur`` origin. Classifier output layers grow by one class before
    fine-tuning; the epoch-0 snapshot is that extended, not-yet-tuned model.
    """
    if not new_class_images:
        raise ValueError("update scenario needs at least one crafted image")
    new_labels = {s.class_label for s in new_class_images}
    if len(new_labels) != 1:
        raise ValueError(f"new images must share one class label, got {sorted(new_labels)}")
    new_label = new_labels.pop()
    existing = {s.class_label for s in split.target_train}
    if new_label in existing:
        raise ValueError(f"new class label {new_label} collides with an existing class")
    bad = [s.sample_id for s in new_class_images if s.origin != "crafted_blur"]
    if bad:
        raise ValueError(f"update images must have origin=crafted_blur; offending: {bad[:5]}")

    model = base.final.clone()
    rng = np.random.default_rng(config.seed + 1)
    _extend_class(model, new_label, config, rng)

    train = list(split.target_train) + list(new_class_images)
    marks = {e: f"update-{e:03d}ep" for e in snapshot_epochs if e <= epochs}
    snaps, stages, curve = _fit(model, train, config, epochs, marks, rng, "update")
    meta = {"seed": config.seed, "added_class": new_label, "epochs": epochs,
            "base_scenario": base.scenario, "loss_curve": curve}
    return SnapshotSet("update", snaps, stages, meta)


def _extend_class(model: TargetModel, new_label: int, config: TrainConfig,
                  rng: np.random.Generator) -> None:
    model.class_labels.append(new_label)
    if model.kind == "feature_extractor":
        col = he_normal(rng, (model.head_w.shape[0], 1), fan_in=model.head_w.shape[0])
        model.head_w = np.concatenate([model.head_w, col], axis=1)
        return
    # classifier: widen the final dense layer by one output
    final = model.net.layers[-1]
    if not isinstance(final, Dense):
        raise RuntimeError("classifier net must end in a Dense layer")
    w, b = final.params["W"], final.params["b"]
    col = he_normal(rng, (w.shape[0], 1), fan_in=w.shape[0])
    final.params["W"] = np.concatenate([w, col], axis=1)
    final.params["b"] = np.concatenate([b, np.zeros(1, dtype=DTYPE)])
    final.zero_grads()
    model.output_dim += 1


def run_downslope_scenario(split: DatasetSplit, removed_class_count: int,
                           config: TrainConfig, schedule: list[float],
                           initial: TargetModel | None = None) -> SnapshotSet:
    """Naive unlearning: drop whole classes, retrain from scratch, snapshot.

    The removed classes are a seeded-uniform choice over the training classes;
    retraining restarts from the same initialization recipe (same seed, same
    optional warm start) as the original run.
    """
    classes = sorted({s.class_label for s in split.target_train})
    if removed_class_count < 0 or removed_class_count >= len(classes):
        raise ValueError(f"removed_class_count must be in [0, {len(classes) - 1}]")
    rng = np.random.default_rng(config.seed + 2)
    removed = sorted(rng.choice(classes, size=removed_class_count, replace=False).tolist())
    kept = [s for s in split.target_train if s.class_label not in set(removed)]
    sub = DatasetSplit(target_train=kept, probe=split.probe, regime=split.regime) \
        if split.regime == "feature_extraction" else None
    if sub is None:
        # classifier probes of removed classes stay out of the retrain split
        probe = [s for s in split.probe if s.class_label not in set(removed)]
        sub = DatasetSplit(target_train=kept, probe=probe, regime=split.regime)
    sset = train_with_snapshots(sub, config, schedule, initial=initial, scenario="downslope")
    sset.metadata["removed_classes"] = removed
    return sset


# ---------------------------------------------------------------------------
# snapshot store
# ---------------------------------------------------------------------------

def save_snapshot_set(sset: SnapshotSet, out_dir: str | Path) -> Path:
    """Directory layout: metadata.json + one weight npz per stage."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first = sset.snapshots[0]
    meta = {
        "scenario": sset.scenario,
        "alpha": sset.alpha,
        "kind": first.kind,
        "output_dim": first.output_dim,
        "backbone_id": first.backbone_id,
        "image_shape": list(first.image_shape),
        "stages": sset.stages,
        "metadata": sset.metadata,
        "class_labels": [m.class_labels for m in sset.snapshots],
        "output_dims": [m.output_dim for m in sset.snapshots],
    }
    with open(out_dir / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    for i, m in enumerate(sset.snapshots):
        arrays = {f"net.{k}": v for k, v in m.net.state_dict().items()}
        if m.head_w is not None:
            arrays["head_w"] = m.head_w
        np.savez(out_dir / f"stage_{i:02d}_{m.stage_tag}.npz", **arrays)
    return out_dir


def load_snapshot_set(in_dir: str | Path, config: TrainConfig) -> SnapshotSet:
    in_dir = Path(in_dir)
    with open(in_dir / "metadata.json") as fh:
        meta = json.load(fh)
    snapshots = []
    image_shape = tuple(meta["image_shape"])
    for i, stage in enumerate(meta["stages"]):
        files = sorted(in_dir.glob(f"stage_{i:02d}_*.npz"))
        if not files:
            raise FileNotFoundError(f"missing weight file for stage {i} in {in_dir}")
        with np.load(files[0]) as zf:
            arrays = {k: zf[k] for k in zf.files}
        labels = meta["class_labels"][i]
        out_dim = meta["output_dims"][i]
        rng = np.random.default_rng(0)  # layer shapes only; weights are overwritten
        net = _build_net(image_shape, out_dim, config, rng)
        net.load_state_dict({k[len("net."):]: v for k, v in arrays.items()
                             if k.startswith("net.")})
        head = arrays.get("head_w")
        snapshots.append(TargetModel(meta["kind"], net, out_dim, meta["backbone_id"],
                                     image_shape, labels, head, stage["tag"]))
    return SnapshotSet(meta["scenario"], snapshots, meta["stages"], meta["metadata"])
