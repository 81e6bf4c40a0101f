"""The inversion GAN: generator, discriminator, losses and training.

The generator is an autoencoder-style decoder from a (possibly augmented)
template vector to an image; the discriminator judges real against
reconstructed images. The generator minimizes an unweighted sum of L1,
structural dissimilarity, perceptual distance and the adversarial term, plus
a slot-index cross-entropy when trained with structured random inputs and
alignment (``srwal``). All updates are plain alternating Adam steps and are
bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .dataset import ImageSample, stack_pixels
from .incorporation import AugmentedVector, VectorTuple, input_width, make_training_input
from .nn import Adam, Conv2d, Dense, Flatten, LeakyRelu, Reshape, Sequential, Sigmoid, Upsample2x
from .nn.layers import DTYPE
from .ssim import ssim_and_grad
from .target_models import softmax_ce

EPS = 1e-7


class InversionDiverged(Exception):
    def __init__(self, epoch: int, step: int, components: dict[str, float]):
        super().__init__(f"non-finite attack loss at epoch {epoch}, step {step}: {components}")
        self.epoch = epoch
        self.step = step
        self.components = components


@dataclass
class AttackConfig:
    """Hyperparameters for inversion-attack training."""

    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    z_dim: int = 128
    dec_channels: tuple[int, ...] = (96, 48, 24, 24)
    disc_widths: tuple[int, ...] = (24, 48, 96)
    ssim_win: int = 11
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["dec_channels"] = list(self.dec_channels)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.5, 0.999)))
        d["dec_channels"] = tuple(d.get("dec_channels", (96, 48, 24, 24)))
        d["disc_widths"] = tuple(d.get("disc_widths", (24, 48, 96)))
        return cls(**d)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class Generator:
    """Vector-to-image decoder with an optional slot-alignment head on z."""

    def __init__(self, input_dim: int, image_shape: tuple[int, int, int], mode: str,
                 alpha: int, rng: np.random.Generator, z_dim: int = 128,
                 dec_channels: tuple[int, ...] = (96, 48, 24, 24)):
        h, w, c = image_shape
        if h != w or h != 4 * 2 ** (len(dec_channels) - 1):
            raise ValueError(f"dec_channels {dec_channels} cannot decode to {h}x{w}; "
                             f"need 4 * 2**(len-1) == {h}")
        self.input_dim = input_dim
        self.image_shape = tuple(image_shape)
        self.mode = mode
        self.alpha = alpha
        self.z_dim = z_dim
        self.dec_channels = tuple(dec_channels)

        self.trunk = Sequential([Dense(input_dim, z_dim, rng), LeakyRelu(0.2)])
        c0 = dec_channels[0]
        layers = [Dense(z_dim, 4 * 4 * c0, rng), LeakyRelu(0.2), Reshape((4, 4, c0))]
        prev = c0
        for ch in dec_channels[1:]:
            layers += [Upsample2x(), Conv2d(prev, ch, k=3, rng=rng), LeakyRelu(0.2)]
            prev = ch
        layers += [Conv2d(prev, c, k=3, rng=rng), Sigmoid()]
        self.decoder = Sequential(layers)
        self.align_head = Sequential([Dense(z_dim, alpha, rng)]) if mode == "srwal" else None
        self._z: np.ndarray | None = None
        self.training_curve: list[dict] = []

    def modules(self) -> list[Sequential]:
        mods = [self.trunk, self.decoder]
        if self.align_head is not None:
            mods.append(self.align_head)
        return mods

    def forward(self, v: np.ndarray, train: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
        """Returns (images, alignment logits or None) for a (N, input_dim) batch."""
        if v.ndim != 2 or v.shape[1] != self.input_dim:
            raise ValueError(f"expected (N, {self.input_dim}) inputs, got {v.shape}")
        self._z = self.trunk.forward(v.astype(DTYPE), train=train)
        images = self.decoder.forward(self._z, train=train)
        logits = self.align_head.forward(self._z, train=train) if self.align_head else None
        return images, logits

    def backward(self, grad_images: np.ndarray, grad_logits: np.ndarray | None = None) -> None:
        grad_z = self.decoder.backward(grad_images)
        if grad_logits is not None:
            if self.align_head is None:
                raise ValueError("no alignment head to backpropagate through")
            grad_z = grad_z + self.align_head.backward(grad_logits)
        self.trunk.backward(grad_z)

    def num_params(self) -> int:
        return sum(m.num_params() for m in self.modules())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        names = ["trunk", "decoder", "align_head"]
        for name, mod in zip(names, self.modules()):
            for k, v in mod.state_dict().items():
                out[f"{name}.{k}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        names = ["trunk", "decoder", "align_head"]
        for name, mod in zip(names, self.modules()):
            prefix = name + "."
            mod.load_state_dict({k[len(prefix):]: v for k, v in state.items()
                                 if k.startswith(prefix)})


def build_discriminator(image_shape: tuple[int, int, int], rng: np.random.Generator,
                        widths: tuple[int, ...] = (24, 48, 96)) -> Sequential:
    h, w, c = image_shape
    n_blocks = int(np.log2(h // 4))
    if len(widths) != n_blocks:
        raise ValueError(f"{h}x{h} images need {n_blocks} stride-2 blocks")
    layers = []
    prev = c
    for width in widths:
        layers += [Conv2d(prev, width, k=4, rng=rng, stride=2, pad=1), LeakyRelu(0.2)]
        prev = width
    layers += [Flatten(), Dense(4 * 4 * prev, 1, rng), Sigmoid()]
    return Sequential(layers)


# ---------------------------------------------------------------------------
# perceptual feature network
# ---------------------------------------------------------------------------

class PerceptualNet:
    """Frozen convolutional feature map used by the perceptual loss."""

    def __init__(self, features: Sequential, image_shape: tuple[int, int, int]):
        self.net = features
        self.image_shape = tuple(image_shape)

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x, train=False)

    def backward_to_input(self, grad_features: np.ndarray) -> np.ndarray:
        # parameters stay frozen: their accumulated grads are simply never applied
        return self.net.backward(grad_features)


def train_perceptual_net(images: np.ndarray, labels: np.ndarray, seed: int = 0,
                         epochs: int = 6, batch_size: int = 32,
                         widths: tuple[int, int] = (16, 32)) -> PerceptualNet:
    """Small conv classifier trained on (images, labels); features = conv activations."""
    n, h, w, c = images.shape
    rng = np.random.default_rng(seed)
    uniq = np.unique(labels)
    lookup = {int(v): i for i, v in enumerate(uniq)}
    t_all = np.array([lookup[int(v)] for v in labels], dtype=np.int64)

    feats = Sequential([Conv2d(c, widths[0], k=4, rng=rng, stride=2, pad=1), LeakyRelu(0.2),
                        Conv2d(widths[0], widths[1], k=4, rng=rng, stride=2, pad=1), LeakyRelu(0.2),
                        Flatten()])
    feat_dim = (h // 4) * (w // 4) * widths[1]
    head = Sequential([Dense(feat_dim, len(uniq), rng)])
    opt = Adam([feats, head], lr=1e-3)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grads()
            f = feats.forward(images[idx], train=True, rng=rng)
            logits = head.forward(f, train=True, rng=rng)
            _, grad = softmax_ce(logits, t_all[idx])
            feats.backward(head.backward(grad))
            opt.step()
    return PerceptualNet(feats, (h, w, c))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBundle:
    """Generator loss components; total is always their unweighted sum."""

    l1: float
    ssim_loss: float
    perceptual: float
    adversarial: float
    alignment: float | None = None
    total: float = field(default=0.0)

    def __post_init__(self):
        if self.l1 < 0 or self.perceptual < 0:
            raise ValueError("l1 and perceptual losses must be >= 0")
        if not -1e-9 <= self.ssim_loss <= 2.0 + 1e-9:
            raise ValueError(f"ssim_loss must lie in [0, 2], got {self.ssim_loss}")
        if self.alignment is not None and self.alignment < 0:
            raise ValueError("alignment loss must be >= 0")
        expected = self.l1 + self.ssim_loss + self.perceptual + self.adversarial \
            + (self.alignment or 0.0)
        if abs(self.total - expected) > 1e-9:
            raise ValueError(f"total {self.total} != sum of components {expected}")


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, EPS, 1.0 - EPS)


def discriminator_loss(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    """-E[log D(real)] - E[log(1 - D(fake))], outputs clamped away from {0,1}."""
    d_real, d_fake = _clamp(np.asarray(d_real)), _clamp(np.asarray(d_fake))
    return float(-np.mean(np.log(d_real)) - np.mean(np.log(1.0 - d_fake)))


def generator_adversarial_loss(d_fake: np.ndarray) -> float:
    """-E[log D(fake)]: low when the generator fools the discriminator."""
    return float(-np.mean(np.log(_clamp(np.asarray(d_fake)))))


def reconstruction_losses(x: np.ndarray, x_hat: np.ndarray,
                          perceptual_net: PerceptualNet | None = None,
                          ssim_win: int = 11) -> tuple[float, float, float]:
    """(L1, structural dissimilarity, perceptual MSE) between image batches.

    Accepts (H,W,C) single images or (N,H,W,C) batches. The perceptual term
    is 0 when no feature network is supplied.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    l1 = float(np.mean(np.abs(x - x_hat)))
    ssim_value, _ = ssim_and_grad(x, x_hat, win_size=ssim_win)
    perceptual = 0.0
    if perceptual_net is not None:
        fx = perceptual_net.features(x)
        fxh = perceptual_net.features(x_hat)
        perceptual = float(np.mean((fx - fxh) ** 2))
    return l1, 1.0 - ssim_value, perceptual


def alignment_loss(logits: np.ndarray, true_index: int | np.ndarray) -> float:
    """Cross-entropy of softmax(logits) against the 1-based true slot index."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim == 1:
        logits = logits[None]
    targets = np.atleast_1d(np.asarray(true_index, dtype=np.int64)) - 1
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError(f"true_index out of range [1, {logits.shape[1]}]")
    loss, _ = softmax_ce(logits, targets)
    return loss


def total_generator_loss(l1: float, ssim_loss: float, perceptual: float, adversarial: float,
                         alignment: float | None = None, mode: str = "rand") -> LossBundle:
    """Unit-weight sum; the alignment term participates only under srwal."""
    if mode == "srwal":
        if alignment is None:
            raise ValueError("srwal requires an alignment loss value")
    else:
        alignment = None
    total = l1 + ssim_loss + perceptual + adversarial + (alignment or 0.0)
    return LossBundle(l1=l1, ssim_loss=ssim_loss, perceptual=perceptual,
                      adversarial=adversarial, alignment=alignment, total=total)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_inversion(bank: list[VectorTuple], probe_images: list[ImageSample], mode: str,
                    config: AttackConfig, perceptual_net: PerceptualNet | None = None) -> Generator:
    """Alternating GAN training over the vector bank; returns the generator.

    ``probe_images`` must match ``bank`` one-to-one by sample_id; incorporation
    inputs are redrawn every update. The per-epoch loss means are kept on
    ``generator.training_curve``.
    """
    if not bank:
        raise ValueError("empty vector bank")
    alpha, m = bank[0].alpha, bank[0].m
    if any((t.alpha, t.m) != (alpha, m) for t in bank):
        raise ValueError("bank tuples disagree on (alpha, m)")
    by_id = {s.sample_id: s for s in probe_images}
    try:
        images = stack_pixels([by_id[t.sample_id] for t in bank])
    except KeyError as exc:
        raise ValueError(f"probe images missing sample {exc.args[0]}") from exc
    image_shape = images.shape[1:]
    width = input_width(mode, alpha, m)

    rng = np.random.default_rng(config.seed)
    gen = Generator(width, image_shape, mode, alpha, rng,
                    z_dim=config.z_dim, dec_channels=config.dec_channels)
    disc = build_discriminator(image_shape, rng, config.disc_widths)
    opt_g = Adam(gen.modules(), lr=config.learning_rate, betas=config.betas)
    opt_d = Adam([disc], lr=config.learning_rate, betas=config.betas)

    n = len(bank)
    pixel_count = int(np.prod(image_shape))
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            aug = [make_training_input(bank[i], mode, rng) for i in idx]
            v = np.stack([a.data for a in aug])
            slots = (np.array([a.slot_index for a in aug], dtype=np.int64)
                     if mode != "concat" else None)
            x = images[idx]
            b = len(idx)

            # --- discriminator update (real and fake scored in one pass) ---
            x_hat, _ = gen.forward(v, train=False)
            disc.zero_grads()
            scores = disc.forward(np.concatenate([x, x_hat]), train=True)
            d_real, d_fake = scores[:b], scores[b:]
            d_loss = discriminator_loss(d_real, d_fake)
            grad_scores = np.concatenate([-1.0 / (_clamp(d_real) * b),
                                          1.0 / ((1.0 - _clamp(d_fake)) * b)])
            disc.backward(grad_scores)
            opt_d.step()

            # --- generator update ---
            opt_g.zero_grads()
            x_hat, logits = gen.forward(v, train=True)
            l1 = float(np.mean(np.abs(x - x_hat)))
            grad_img = np.sign(x_hat - x) / (b * pixel_count)

            ssim_value, ssim_grad = ssim_and_grad(x, x_hat, win_size=config.ssim_win)
            grad_img -= ssim_grad  # d(1 - ssim)/dx_hat

            perceptual = 0.0
            if perceptual_net is not None:
                fx = perceptual_net.features(x)
                fxh = perceptual_net.features(x_hat)
                perceptual = float(np.mean((fx - fxh) ** 2))
                grad_img += perceptual_net.backward_to_input(2.0 * (fxh - fx) / fx.size)

            d_fake2 = disc.forward(x_hat, train=False)
            adversarial = generator_adversarial_loss(d_fake2)
            grad_img += disc.backward(-1.0 / (_clamp(d_fake2) * b))

            align_val = None
            grad_logits = None
            if mode == "srwal":
                align_val, grad_logits = softmax_ce(logits, slots - 1)
            bundle = total_generator_loss(l1, 1.0 - ssim_value, perceptual, adversarial,
                                          align_val, mode)
            if not np.isfinite(bundle.total) or not np.isfinite(d_loss):
                raise InversionDiverged(epoch, batches, {
                    "l1": l1, "ssim_loss": 1.0 - ssim_value, "perceptual": perceptual,
                    "adversarial": adversarial, "alignment": align_val or 0.0,
                    "d_loss": d_loss})
            gen.backward(grad_img, grad_logits)
            opt_g.step()

            batches += 1
            for key, val in [("l1", l1), ("ssim", 1.0 - ssim_value), ("perceptual", perceptual),
                             ("adversarial", adversarial), ("alignment", align_val or 0.0),
                             ("total", bundle.total), ("d_loss", d_loss)]:
                sums[key] = sums.get(key, 0.0) + val
        gen.training_curve.append({"epoch": epoch,
                                   **{k: v / batches for k, v in sums.items()}})
    return gen


def invert(generator: Generator, aug: AugmentedVector) -> np.ndarray:
    """Deterministic single-input inversion; returns an (H, W, C) image in [0,1]."""
    if aug.data.shape[0] != generator.input_dim:
        raise ValueError(f"input width {aug.data.shape[0]} does not match generator "
                         f"input {generator.input_dim}")
    images, _ = generator.forward(aug.data[None], train=False)
    return images[0]


def invert_batch(generator: Generator, augs: list[AugmentedVector]) -> np.ndarray:
    for a in augs:
        if a.data.shape[0] != generator.input_dim:
            raise ValueError("input width mismatch")
    images, _ = generator.forward(np.stack([a.data for a in augs]), train=False)
    return images


def invert_averaged(generator: Generator, augs: list[AugmentedVector]) -> np.ndarray:
    """Mean generator output over several inputs (sr/srwal "all models" testing)."""
    return invert_batch(generator, augs).mean(axis=0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_generator(gen: Generator, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"input_dim": gen.input_dim, "image_shape": list(gen.image_shape),
            "mode": gen.mode, "alpha": gen.alpha, "z_dim": gen.z_dim,
            "dec_channels": list(gen.dec_channels)}
    with open(out_dir / "generator.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    np.savez(out_dir / "generator.npz", **gen.state_dict())
    if gen.training_curve:
        save_training_curve(gen.training_curve, out_dir / "training_curve.csv")
    return out_dir


def load_generator(in_dir: str | Path) -> Generator:
    in_dir = Path(in_dir)
    with open(in_dir / "generator.json") as fh:
        meta = json.load(fh)
    gen = Generator(meta["input_dim"], tuple(meta["image_shape"]), meta["mode"],
                    meta["alpha"], np.random.default_rng(0), z_dim=meta["z_dim"],
                    dec_channels=tuple(meta["dec_channels"]))
    with np.load(in_dir / "generator.npz") as zf:
        gen.load_state_dict({k: zf[k] for k in zf.files})
    curve = in_dir / "training_curve.csv"
    if curve.exists():
        with open(curve) as fh:
            gen.training_curve = [{k: float(v) if k != "epoch" else int(v)
                                   for k, v in row.items()}
                                  for row in csv.DictReader(fh)]
    return gen


def save_training_curve(curve: list[dict], path: str | Path) -> Path:
    path = Path(path)
    cols = ["epoch", "l1", "ssim", "perceptual", "adversarial", "alignment", "total", "d_loss"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: row.get(k, 0.0) for k in cols})
    return path
