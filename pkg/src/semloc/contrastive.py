"""Self-supervised contrastive training of mask embeddings.

A batch holds N source masks, each augmented twice; the 2N views are stacked
as [first views | second views] so sample i pairs with i+N (an involution).
The loss for anchor i is

    -log( exp(sim(i, pair(i)) / tau) / sum_{a != i} exp(sim(i, a) / tau) )

summed over all 2N anchors; the denominator runs over the 2N-1 other views
(the positive plus 2N-2 negatives), never the anchor itself. With normalized
embeddings sim is cosine similarity. Optimization is plain SGD (optional
momentum), which is enough at these scales.

Reference-scale settings from the original recipe: tau 0.07, lr 0.05, batches
of 87 masks (174 views), r in R^512 with z in R^2048. The desk-scale defaults
below train in seconds on a laptop while exercising identical math.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, make_pair
from .configfile import apply_kv, parse_kv_file
from .errors import ConfigError
from .maskio import SemanticMask, resize_nearest
from .nn import (
    EmbeddingModel,
    build_default_model,
    dense,
    l2_normalize,
    l2_normalize_vjp,
    one_hot_batch,
    one_hot_encode,
    relu,
)

log = logging.getLogger(__name__)

FINETUNE_MODES = ("none", "last_two_dense", "add_two_dense", "all_layers")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for contrastive training and fine-tuning."""

    batch_n: int = 16          # N source masks; the batch holds 2N views
    temperature: float = 0.07
    lr: float = 0.02           # higher rates can dead-ReLU the tiny encoder
    epochs: int = 30
    seed: int = 0
    momentum: float = 0.0
    normalize: bool = True
    embed_dim: int = 64
    proj_dim: int = 128
    palette_size: int = 8
    finetune_mode: str = "none"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_n < 2:
            raise ConfigError(f"batch_n must be >= 2, got {self.batch_n}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ConfigError(
                f"finetune_mode must be one of {FINETUNE_MODES}, got {self.finetune_mode!r}"
            )
        if self.palette_size < 2:
            raise ConfigError(f"palette_size must be >= 2, got {self.palette_size}")


def load_train_config(path: str | Path) -> TrainConfig:
    """Build a TrainConfig from a flat key=value file.

    Keys mirror the field names; augmentation keys (min_crop_ratio,
    max_rotation_deg, out_w, out_h, fill_class) address the nested config.
    Unknown keys or bad values raise ConfigError.
    """
    pairs = parse_kv_file(path)
    train_fields = {
        f.name: _FIELD_TYPES[f.name] for f in fields(TrainConfig) if f.name != "augment"
    }
    aug_fields = {
        f.name: _FIELD_TYPES[f.name] for f in fields(AugmentConfig) if f.name != "seed"
    }
    train_raw = {k: v for k, v in pairs.items() if k in train_fields}
    aug_raw = {k: v for k, v in pairs.items() if k in aug_fields}
    stray = set(pairs) - set(train_raw) - set(aug_raw)
    if stray:
        known = ", ".join(sorted(set(train_fields) | set(aug_fields)))
        raise ConfigError(f"unknown config keys {sorted(stray)} (known: {known})")
    train_kwargs = apply_kv(train_raw, train_fields)
    aug_kwargs = apply_kv(aug_raw, aug_fields)
    try:
        seed = int(train_kwargs.get("seed", 0))
        augment = AugmentConfig(seed=seed, **aug_kwargs)
        return TrainConfig(augment=augment, **train_kwargs)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from None


_FIELD_TYPES = {
    "batch_n": int, "temperature": float, "lr": float, "epochs": int,
    "seed": int, "momentum": float, "normalize": bool, "embed_dim": int,
    "proj_dim": int, "palette_size": int, "finetune_mode": str,
    "min_crop_ratio": float, "max_rotation_deg": float, "out_w": int,
    "out_h": int, "fill_class": int,
}


# ---------------------------------------------------------------------------
# Batches and the loss


def pair_indices(n: int) -> np.ndarray:
    """Positive-pair mapping for a stacked batch of 2n views: i <-> i+n."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    idx = np.arange(2 * n)
    return (idx + n) % (2 * n)


@dataclass(frozen=True)
class Batch:
    """2N embeddings plus the involution pairing each view with its partner."""

    embeddings: np.ndarray
    pair_index: np.ndarray

    def __post_init__(self) -> None:
        z = np.asarray(self.embeddings, dtype=np.float64)
        j = np.asarray(self.pair_index, dtype=np.intp)
        object.__setattr__(self, "embeddings", z)
        object.__setattr__(self, "pair_index", j)
        if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2 != 0:
            raise ValueError(f"embeddings must be (2N, d) with N >= 1, got {z.shape}")
        if j.shape != (z.shape[0],):
            raise ValueError("pair_index length must match the number of embeddings")
        idx = np.arange(z.shape[0])
        if np.any(j == idx) or not np.array_equal(j[j], idx):
            raise ValueError("pair_index must be an involution with no fixed points")

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])


def info_nce_loss(batch: Batch, temperature: float) -> tuple[float, np.ndarray]:
    """Summed contrastive loss over all anchors and its gradient.

    Returns (loss, d loss / d embeddings). The per-anchor term is computed
    with a max-shifted log-sum-exp, so a batch of one pair (2N = 2, no
    negatives) yields exactly 0.0.

    Raises:
        ConfigError: temperature <= 0.
        ValueError: non-finite embeddings.
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = batch.embeddings
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite values in embeddings")
    j = batch.pair_index
    two_n = batch.size

    sims = (z @ z.T) / temperature
    np.fill_diagonal(sims, -np.inf)  # the anchor never scores against itself
    shift = sims.max(axis=1, keepdims=True)
    expo = np.exp(sims - shift)
    denom = expo.sum(axis=1, keepdims=True)
    log_denom = shift[:, 0] + np.log(denom[:, 0])
    positives = sims[np.arange(two_n), j]
    loss = float(np.sum(log_denom - positives))

    softmax = expo / denom
    softmax[np.arange(two_n), j] -= 1.0
    grad = ((softmax + softmax.T) @ z) / temperature
    return loss, grad


# ---------------------------------------------------------------------------
# Training


def _epoch_pass(
    model: EmbeddingModel,
    masks: Sequence[SemanticMask],
    config: TrainConfig,
    rng: np.random.Generator,
    trainable: np.ndarray,
    velocity: np.ndarray | None,
    augmented: bool,
    partners: Sequence[SemanticMask] | None = None,
) -> float:
    """One epoch of SGD over shuffled full batches; returns mean per-anchor loss."""
    n = config.batch_n
    order = rng.permutation(len(masks))
    n_batches = len(masks) // n
    loss_sum = 0.0
    anchors = 0
    pairing = pair_indices(n)
    for b in range(n_batches):
        chosen = order[b * n : (b + 1) * n]
        first: list[SemanticMask] = []
        second: list[SemanticMask] = []
        for idx in chosen:
            if augmented:
                va, vb = make_pair(masks[idx], config.augment, rng)
            else:
                va = resize_nearest(masks[idx], config.augment.out_w, config.augment.out_h)
                vb = resize_nearest(partners[idx], config.augment.out_w, config.augment.out_h)
            first.append(va)
            second.append(vb)
        x = one_hot_batch(first + second, config.palette_size)
        _, z_raw = model.forward(x, record=True)
        if config.normalize:
            norms = np.linalg.norm(z_raw, axis=-1, keepdims=True)
            z_use = l2_normalize(z_raw)
        else:
            z_use = z_raw
        loss, grad_z = info_nce_loss(Batch(z_use, pairing), config.temperature)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"training diverged: non-finite loss in batch {b} "
                f"(|z| max {np.abs(z_raw).max():.3e}); lower lr or raise temperature"
            )
        if config.normalize:
            grad_z = l2_normalize_vjp(z_use, norms, grad_z)
        grad = model.backward(grad_z)
        if velocity is not None:
            velocity *= config.momentum
            velocity += grad
            update = velocity
        else:
            update = grad
        model.params[trainable] -= config.lr * update[trainable]
        loss_sum += loss
        anchors += 2 * n
    if anchors == 0:
        raise ValueError(
            f"dataset of {len(masks)} masks yields no full batch of {n}"
        )
    return loss_sum / anchors


def train(
    dataset: Sequence[SemanticMask],
    config: TrainConfig,
    model: EmbeddingModel | None = None,
) -> tuple[EmbeddingModel, list[float]]:
    """Contrastive training from scratch (or from ``model`` if given).

    Every mask in ``dataset`` is an unlabeled training sample; each batch
    draws N of them and builds positive pairs by augmenting twice. Returns
    the trained model and the per-epoch mean anchor loss. Deterministic for a
    fixed (dataset order, config).
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if len(dataset) < config.batch_n:
        raise ValueError(
            f"dataset has {len(dataset)} masks; need at least batch_n={config.batch_n}"
        )
    seed_root = np.random.SeedSequence(config.seed)
    init_seed, loop_seed = seed_root.spawn(2)
    if model is None:
        model = build_default_model(
            palette_size=config.palette_size,
            in_h=config.augment.out_h,
            in_w=config.augment.out_w,
            embed_dim=config.embed_dim,
            proj_dim=config.proj_dim,
            seed=init_seed,
            normalize=config.normalize,
        )
    rng = np.random.default_rng(loop_seed)
    trainable = np.ones(model.n_params, dtype=bool)
    velocity = np.zeros_like(model.params) if config.momentum > 0 else None
    history: list[float] = []
    for epoch in range(config.epochs):
        mean_loss = _epoch_pass(
            model, dataset, config, rng, trainable, velocity, augmented=True
        )
        history.append(mean_loss)
        log.info("epoch %d/%d: mean loss %.6f", epoch + 1, config.epochs, mean_loss)
    return model, history


def finetune(
    model: EmbeddingModel,
    labeled_pairs: Sequence[tuple[SemanticMask, SemanticMask]],
    config: TrainConfig,
) -> EmbeddingModel:
    """Supervised adaptation on known (query, database) positive pairs.

    The positives are the given pairs themselves — no augmentation; masks are
    resized to the model's input raster. ``config.finetune_mode`` selects what
    moves:

    * ``last_two_dense`` — only the last two dense layers of the projection
      head (error if the head has fewer than two).
    * ``add_two_dense``  — append dense(z)->ReLU->dense(z) to the head and
      train only the appended parameters.
    * ``all_layers``     — everything.

    Returns the adapted model; the input model is not modified.
    """
    mode = config.finetune_mode
    if mode == "none":
        raise ConfigError("finetune requires finetune_mode != 'none'")
    if len(labeled_pairs) == 0:
        raise ValueError("no labeled pairs to fine-tune on")
    if len(labeled_pairs) < config.batch_n:
        raise ValueError(
            f"{len(labeled_pairs)} pairs; need at least batch_n={config.batch_n}"
        )
    seed_root = np.random.SeedSequence(config.seed)
    grow_seed, loop_seed = seed_root.spawn(2)

    if mode == "add_two_dense":
        zdim = model.proj_dim
        extended = EmbeddingModel(
            model.input_shape,
            model.encoder,
            model.projection + (dense(zdim), relu(), dense(zdim)),
            seed=grow_seed,
            normalize=model.normalize,
        )
        extended.params[: model.n_params] = model.params
        work = extended
        trainable = np.zeros(work.n_params, dtype=bool)
        trainable[model.n_params :] = True
    elif mode == "last_two_dense":
        work = model.copy()
        dense_indices = [
            len(work.encoder) + i
            for i, desc in enumerate(work.projection)
            if desc.kind == "dense"
        ]
        if len(dense_indices) < 2:
            raise ConfigError(
                "last_two_dense needs a projection head with at least two dense layers"
            )
        trainable = np.zeros(work.n_params, dtype=bool)
        for index in dense_indices[-2:]:
            trainable[work.parameter_slice(index)] = True
    else:  # all_layers
        work = model.copy()
        trainable = np.ones(work.n_params, dtype=bool)

    rng = np.random.default_rng(loop_seed)
    queries = [p[0] for p in labeled_pairs]
    references = [p[1] for p in labeled_pairs]
    velocity = np.zeros_like(work.params) if config.momentum > 0 else None
    for epoch in range(config.epochs):
        mean_loss = _epoch_pass(
            work, queries, config, rng, trainable, velocity,
            augmented=False, partners=references,
        )
        log.info("finetune epoch %d/%d: mean loss %.6f", epoch + 1, config.epochs, mean_loss)
    return work


# ---------------------------------------------------------------------------
# Embedding similarity


def embed_mask(model: EmbeddingModel, mask: SemanticMask) -> np.ndarray:
    """The model's z vector for one mask (normalized if the model says so)."""
    in_c, in_h, in_w = model.input_shape
    if mask.shape != (in_h, in_w):
        raise ValueError(
            f"mask is {mask.shape}, model expects {(in_h, in_w)}; resize explicitly"
        )
    x = one_hot_encode(mask, in_c)[None]
    _, z = model.forward(x)
    z = z[0]
    return l2_normalize(z) if model.normalize else z


def embed_similarity(model: EmbeddingModel, a: SemanticMask, b: SemanticMask) -> float:
    """Dot product of the two masks' embeddings (cosine when normalizing)."""
    return float(embed_mask(model, a) @ embed_mask(model, b))


def with_finetune_mode(config: TrainConfig, mode: str) -> TrainConfig:
    return replace(config, finetune_mode=mode)
