"""Conditional GAN in embedding space for balancing long-tail classes.

One generator/discriminator pair is shared across classes via one-hot
conditioning (standalone per-class models would starve on minority counts).
The discriminator minimizes the negated two-term value function; the
generator defaults to the non-saturating loss, with the original
log(1 - D(G(z))) form available behind ``loss_mode="paper"``.

Augmentation raises each minority class to the (upper) median count of the
classes present, subject to a cap on the synthetic share per class. Real
samples are never removed or mutated; synthetic ones are appended, flagged,
in class order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import EmbeddingDataset
from .tensor import (
    AdamState,
    Matrix,
    adam_step,
    add,
    add_bias,
    concat_cols,
    log_sigmoid,
    matmul,
    mean_all,
    neg,
    relu,
    zero_grad,
)

__all__ = [
    "GanConfig",
    "AugmentationPolicy",
    "GanHistory",
    "Generator",
    "Discriminator",
    "d_loss",
    "g_loss",
    "train_gan",
    "augment",
    "augmentation_targets",
    "one_hot",
]

logger = logging.getLogger(__name__)

LOSS_MODES = ("paper", "non_saturating")


@dataclass(frozen=True)
class GanConfig:
    epochs: int = 1000
    batch: int = 32
    lr: float = 1e-3
    z_dim: int = 8
    k_disc: int = 1
    hidden: tuple[int, ...] = (64,)
    beta1: float = 0.5
    beta2: float = 0.999
    loss_mode: str = "non_saturating"
    balanced_batches: bool = True  # resample classes uniformly while training
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.epochs < 0 or self.batch < 1 or self.z_dim < 1 or self.k_disc < 1:
            raise ValueError("epochs/batch/z_dim/k_disc out of range")


@dataclass(frozen=True)
class AugmentationPolicy:
    """How far to raise minority classes and how much synthetic share to allow."""

    target: int | str = "median"  # "median" or a fixed per-class count
    max_synthetic_fraction: float = 1.0

    def __post_init__(self):
        if isinstance(self.target, str):
            if self.target != "median":
                raise ValueError(f'target must be "median" or a positive int, got {self.target!r}')
        elif self.target < 1:
            raise ValueError(f"fixed target must be >= 1, got {self.target}")
        if not 0.0 < self.max_synthetic_fraction <= 1.0:
            raise ValueError(
                f"max_synthetic_fraction must be in (0, 1], got {self.max_synthetic_fraction}"
            )


@dataclass
class GanHistory:
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)
    skipped_classes: list[int] = field(default_factory=list)


def one_hot(labels, num_classes: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    out = np.zeros((lab.size, num_classes), dtype=np.float32)
    out[np.arange(lab.size), lab] = 1.0
    return out


class _Mlp:
    """Plain ReLU MLP with trainable Matrix weights."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers: list[tuple[Matrix, Matrix]] = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = Matrix(
                (rng.uniform(-1.0, 1.0, (n_in, n_out)) / np.sqrt(n_in)).astype(np.float32),
                requires_grad=True,
            )
            b = Matrix(np.zeros((1, n_out), dtype=np.float32), requires_grad=True)
            self.layers.append((w, b))

    def forward(self, x: Matrix) -> Matrix:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = add_bias(matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h

    def parameters(self) -> list[Matrix]:
        return [m for pair in self.layers for m in pair]


class Generator(_Mlp):
    """Maps (noise z | class one-hot) to an embedding-space sample."""

    def __init__(self, z_dim: int, num_classes: int, out_dim: int,
                 hidden: tuple[int, ...], rng: np.random.Generator):
        super().__init__([z_dim + num_classes, *hidden, out_dim], rng)
        self.z_dim = z_dim
        self.num_classes = num_classes
        self.out_dim = out_dim

    def forward_z(self, z: Matrix, labels) -> Matrix:
        return self.forward(concat_cols(z, Matrix(one_hot(labels, self.num_classes))))

    def sample(self, rng: np.random.Generator, labels) -> np.ndarray:
        """Generate embeddings for the given labels, outside any tape."""
        labels = np.asarray(labels, dtype=np.int64)
        z = Matrix(rng.standard_normal((labels.size, self.z_dim)).astype(np.float32))
        return self.forward_z(z, labels).data


class Discriminator(_Mlp):
    """Maps (embedding | class one-hot) to a single real-vs-fake logit."""

    def __init__(self, dim: int, num_classes: int,
                 hidden: tuple[int, ...], rng: np.random.Generator):
        super().__init__([dim + num_classes, *hidden, 1], rng)
        self.num_classes = num_classes

    def score(self, x: Matrix, labels) -> Matrix:
        return self.forward(concat_cols(x, Matrix(one_hot(labels, self.num_classes))))


def d_loss(disc: Discriminator, real: Matrix, fake: Matrix, labels) -> Matrix:
    """Negated value function: -(E[log D(real)] + E[log(1 - D(fake))])."""
    if real.rows == 0 or fake.rows == 0:
        raise ValueError("d_loss: batches must be nonempty")
    lr_ = disc.score(real, labels)
    lf = disc.score(fake, labels)
    # log(1 - sigmoid(x)) == log_sigmoid(-x), evaluated stably
    return neg(add(mean_all(log_sigmoid(lr_)), mean_all(log_sigmoid(neg(lf)))))


def g_loss(disc: Discriminator, fake: Matrix, labels, mode: str = "non_saturating") -> Matrix:
    """Generator objective: original min-max term or the non-saturating form."""
    if mode not in LOSS_MODES:
        raise ValueError(f"mode must be one of {LOSS_MODES}, got {mode!r}")
    lf = disc.score(fake, labels)
    if mode == "paper":
        return mean_all(log_sigmoid(neg(lf)))
    return neg(mean_all(log_sigmoid(lf)))


def train_gan(dataset: EmbeddingDataset, config: GanConfig
              ) -> tuple[Generator, Discriminator, GanHistory]:
    """Alternating-update training, deterministic under the config seed.

    Classes with fewer than two samples cannot be mimicked; their samples
    are dropped from training and the class ids recorded as skipped. With
    ``balanced_batches`` the real minibatches are resampled uniformly over
    the usable classes, otherwise conditioning on rare classes never gets
    enough discriminator signal to stick.
    """
    history = GanHistory()
    hist = dataset.class_histogram
    skipped = [c for c in range(dataset.num_classes) if 0 < hist[c] < 2]
    if skipped:
        logger.warning("gan: skipping classes with < 2 samples: %s", skipped)
        history.skipped_classes = skipped
    keep = ~np.isin(dataset.labels, skipped)
    vectors = dataset.vectors[keep]
    labels = dataset.labels[keep]
    if vectors.shape[0] < 2:
        raise ValueError("train_gan: need at least 2 usable samples")

    rng = np.random.default_rng([int(config.seed), 60493])
    gen = Generator(config.z_dim, dataset.num_classes, dataset.dim, config.hidden, rng)
    disc = Discriminator(dataset.dim, dataset.num_classes, config.hidden, rng)
    g_opt = AdamState(gen.parameters())
    d_opt = AdamState(disc.parameters())

    from .tensor import Tape

    n = vectors.shape[0]
    classes = np.unique(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    step = 0
    for _ in range(config.epochs):
        if config.balanced_batches:
            draws = rng.choice(classes, size=n)
            order = np.array([by_class[c][rng.integers(by_class[c].size)] for c in draws])
        else:
            order = rng.permutation(n)
        d_losses, g_losses = [], []
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            real = Matrix(vectors[idx])
            lab = labels[idx]

            # Discriminator step: fakes are sampled outside the tape (detached).
            z = rng.standard_normal((idx.size, config.z_dim)).astype(np.float32)
            fake_data = gen.forward_z(Matrix(z), lab).data
            with Tape() as tape:
                dl = d_loss(disc, real, Matrix(fake_data), lab)
                tape.backward(dl)
            adam_step(disc.parameters(), [p.grad for p in disc.parameters()], d_opt,
                      config.lr, config.beta1, config.beta2)
            zero_grad(disc.parameters())
            d_losses.append(dl.item())

            step += 1
            if step % config.k_disc == 0:
                z2 = rng.standard_normal((idx.size, config.z_dim)).astype(np.float32)
                with Tape() as tape:
                    fake = gen.forward_z(Matrix(z2), lab)
                    gl = g_loss(disc, fake, lab, config.loss_mode)
                    tape.backward(gl)
                adam_step(gen.parameters(), [p.grad for p in gen.parameters()], g_opt,
                          config.lr, config.beta1, config.beta2)
                zero_grad(gen.parameters())
                zero_grad(disc.parameters())  # discriminator grads from the g step are discarded
                g_losses.append(gl.item())
        history.d_loss.append(float(np.mean(d_losses)) if d_losses else 0.0)
        history.g_loss.append(float(np.mean(g_losses)) if g_losses else 0.0)
    return gen, disc, history


def augmentation_targets(histogram: np.ndarray, policy: AugmentationPolicy
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Per-class synthetic counts under the policy, plus the unreachable shortfall.

    Returns (synth_counts, shortfall); shortfall[c] > 0 means the cap or a
    sub-2-sample class kept the target out of reach.
    """
    hist = np.asarray(histogram, dtype=np.int64)
    present = hist[hist > 0]
    if isinstance(policy.target, str):
        target = int(np.sort(present)[present.size // 2]) if present.size else 0
    else:
        target = int(policy.target)
    synth = np.zeros_like(hist)
    shortfall = np.zeros_like(hist)
    cap = policy.max_synthetic_fraction
    for c, real in enumerate(hist):
        need = max(0, target - int(real))
        if need == 0:
            continue
        if real < 2:
            shortfall[c] = need
            continue
        if cap < 1.0:
            allowed = int(np.floor(real * cap / (1.0 - cap)))
        else:
            allowed = need
        synth[c] = min(need, allowed)
        shortfall[c] = need - synth[c]
    return synth, shortfall


def augment(dataset: EmbeddingDataset, generator: Generator,
            policy: AugmentationPolicy, seed: int = 0) -> EmbeddingDataset:
    """Append generator samples until the policy targets are met (or capped)."""
    synth, shortfall = augmentation_targets(dataset.class_histogram, policy)
    if shortfall.any():
        achieved = dataset.class_histogram + synth
        logger.warning(
            "augment: target unreachable for classes %s (shortfall %s); achieved counts %s",
            np.flatnonzero(shortfall).tolist(),
            shortfall[shortfall > 0].tolist(),
            achieved.tolist(),
        )
    if not synth.any():
        return dataset
    rng = np.random.default_rng([int(seed), 30011])
    new_vectors = [dataset.vectors]
    new_labels = [dataset.labels]
    new_flags = [dataset.synthetic]
    for c in range(dataset.num_classes):
        if synth[c] == 0:
            continue
        labels_c = np.full(int(synth[c]), c, dtype=np.int64)
        new_vectors.append(generator.sample(rng, labels_c))
        new_labels.append(labels_c)
        new_flags.append(np.ones(int(synth[c]), dtype=bool))
    return EmbeddingDataset(
        np.vstack(new_vectors),
        np.concatenate(new_labels),
        dataset.num_classes,
        np.concatenate(new_flags),
    )
