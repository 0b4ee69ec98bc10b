"""Variance-aware training: a shared-weight encoder, a task head, and a subset
discriminator fed through gradient reversal.

The training image ``x_tr`` and an auxiliary image ``x_a`` pass through the
same encoder. The task head only sees ``x_tr``. Per-channel spatial means and
standard deviations of the encoder blocks (all blocks for early aggregation,
the last one for late aggregation) are reversed with :func:`grl`, concatenated
and classified as "same subset or not". Minimizing
``L_main + lambda * BCE`` then trains the discriminator normally while pushing
the encoder towards statistics that do not reveal which subset an image came
from.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import DimensionError, Tape, Tensor
from .data import AugmentPolicy, DatasetSplit, Subset, augment_batch, N_GRADES
from .diagnostics import feature_gap
from .errors import ConfigError
from .metrics import metric_auc, metric_kappa_qw

AGGREGATIONS = ("early", "late")


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    image_size: int = 16
    channels: tuple[int, ...] = (8, 16, 32)
    head_hidden: int = 32
    disc_hidden: int = 64
    disc_layers: int = 2
    kernel: int = 3

    def validate(self) -> None:
        if not self.channels:
            raise ConfigError("encoder needs at least one block")
        final = self.image_size // 2 ** len(self.channels)
        if final < 1 or self.image_size % 2 ** len(self.channels):
            raise ConfigError(f"image_size {self.image_size} cannot be pooled {len(self.channels)} times")
        if final * final < 2:
            raise ConfigError("last block has a 1x1 spatial extent; its standard deviation is undefined")


@dataclass(frozen=True)
class VatConfig:
    lam: float = 0.0
    aggregation: str = "early"
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 50
    lr: float = 1e-3
    seed: int = 0
    task: str = "binary"
    arch: ArchConfig = field(default_factory=ArchConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.none)
    track_feature_gap: bool = True
    # False keeps the final parameters (fixed-budget training) instead of the best-validation ones
    restore_best: bool = True

    def validate(self) -> None:
        if not self.lam >= 0 or not math.isfinite(self.lam):
            raise ConfigError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")
        if self.task not in ("binary", "ordinal"):
            raise ConfigError(f"task must be 'binary' or 'ordinal', got {self.task!r}")
        self.arch.validate()


@dataclass
class AuxSample:
    image: np.ndarray
    t_a: int  # 1: drawn from X_tr, 0: drawn from X_pre
    index: int


def sample_auxiliary(i_tr: int, X_tr, X_pre, rng) -> AuxSample:
    """Pick the auxiliary partner of training item ``i_tr``.

    With probability 1/2 another X_tr item (label 1), otherwise an X_pre item (label 0).
    """
    tr_images = getattr(X_tr, "images", X_tr)
    pre_images = getattr(X_pre, "images", X_pre)
    a = rng.uniform()
    if a <= 0.5:
        n = len(tr_images)
        if n < 2:
            raise ValueError("X_tr needs at least 2 items to draw a distinct partner")
        j = int(rng.integers(0, n - 1))
        j += j >= i_tr
        return AuxSample(tr_images[j], 1, j)
    if len(pre_images) < 1:
        raise ValueError("X_pre is empty")
    j = int(rng.integers(0, len(pre_images)))
    return AuxSample(pre_images[j], 0, j)


def feature_stats(block_activations, mode: str = "early") -> Tensor:
    """Per-sample [mean_c, std_c] for each block, concatenated in block order: shape [B, sum 2*C_k]."""
    if mode not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    acts = list(block_activations) if mode == "early" else [block_activations[-1]]
    parts = []
    for act in acts:
        parts.append(ad.mean(act, (2, 3)))
        parts.append(ad.sqrt(ad.variance(act, (2, 3))))
    return ad.concat(parts, axis=1)


def stats_length(channels, mode: str) -> int:
    return 2 * sum(channels) if mode == "early" else 2 * channels[-1]


class VatModel:
    """Encoder blocks + task head + discriminator MLP with a single named parameter set."""

    def __init__(self, arch: ArchConfig = ArchConfig(), aggregation: str = "early", task: str = "binary"):
        arch.validate()
        self.arch = arch
        self.aggregation = aggregation
        self.task = task
        self.blocks = []
        c_in = arch.in_channels
        for k, c in enumerate(arch.channels):
            self.blocks.append(nn.ConvBlock(f"enc{k}", nn.LayerSpec("conv-block", c_in, c, "relu", arch.kernel)))
            c_in = c
        side = arch.image_size // 2 ** len(arch.channels)
        flat = arch.channels[-1] * side * side
        out_act = "sigmoid" if task == "binary" else None
        self.head = [
            nn.Dense("head0", nn.LayerSpec("dense", flat, arch.head_hidden, "relu")),
            nn.Dense("head1", nn.LayerSpec("task-head", arch.head_hidden, 1, out_act)),
        ]
        width = 2 * stats_length(arch.channels, aggregation)
        self.disc = []
        for k in range(arch.disc_layers):
            self.disc.append(nn.Dense(f"disc{k}", nn.LayerSpec("mlp-head", width, arch.disc_hidden, "relu")))
            width = arch.disc_hidden
        self.disc.append(nn.Dense(f"disc{arch.disc_layers}", nn.LayerSpec("mlp-head", width, 1, "sigmoid")))

    @property
    def layers(self) -> list:
        return self.blocks + self.head + self.disc

    @property
    def params(self) -> list[nn.Parameter]:
        return [p for layer in self.layers for p in layer.params]

    def init(self, seed) -> "VatModel":
        nn.init_params(self.layers, seed)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.value = state[p.name].copy()

    def encode(self, tape: Optional[Tape], x) -> list[Tensor]:
        h = x if isinstance(x, Tensor) else Tensor(x)
        acts = []
        for block in self.blocks:
            h = block(tape, h)
            acts.append(h)
        return acts

    def task_head(self, tape: Optional[Tape], embedding: Tensor) -> Tensor:
        h = ad.flatten(embedding, 1)
        for layer in self.head:
            h = layer(tape, h)
        return h

    def discriminate(self, tape: Optional[Tape], stats_tr: Tensor, stats_a: Tensor) -> Tensor:
        """P(same subset) for each pair; both stats vectors pass through gradient reversal first."""
        if stats_tr.shape != stats_a.shape:
            raise DimensionError(f"stats vectors differ in shape: {stats_tr.shape} vs {stats_a.shape}")
        h = ad.concat([nn.grl(stats_tr), nn.grl(stats_a)], axis=1)
        for layer in self.disc:
            h = layer(tape, h)
        return h

    # ---------------------------------------------------------------- untaped helpers

    def _chunks(self, images: np.ndarray, size: int = 512):
        for start in range(0, len(images), size):
            yield images[start : start + size]

    def scores(self, images: np.ndarray) -> np.ndarray:
        out = [self.task_head(None, self.encode(None, chunk)[-1]).data[:, 0] for chunk in self._chunks(images)]
        return np.concatenate(out) if out else np.zeros(0)

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        """Predictive distribution per image: [1-p, p] for binary, a softmax over grades for ordinal."""
        s = self.scores(images)
        if self.task == "binary":
            return np.stack([1.0 - s, s], axis=1)
        logits = -0.5 * (np.arange(N_GRADES)[None, :] - s[:, None]) ** 2
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        return w / w.sum(axis=1, keepdims=True)

    def feature_stats_array(self, images: np.ndarray, mode: str = "early") -> np.ndarray:
        return np.concatenate([feature_stats(self.encode(None, c), mode).data for c in self._chunks(images)])


def task_loss(task: str, output: Tensor, targets: np.ndarray) -> Tensor:
    if task == "binary":
        return nn.loss_bce(output, targets)
    return nn.loss_mae(output, np.asarray(targets, dtype=np.float64).reshape(output.shape))


def vat_total_loss(main_loss, aux_bce, lam: float):
    """L_main + lambda * BCE; works on floats and on tensors."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if isinstance(main_loss, Tensor):
        return main_loss + ad.scale(aux_bce, lam)
    return main_loss + lam * aux_bce


@dataclass
class StepLosses:
    main: float
    aux_bce: float
    total: float


class NonFiniteLossError(FloatingPointError):
    pass


def build_loss(model: VatModel, tape: Optional[Tape], x, y, x_a=None, t_a=None, lam: float = 0.0):
    """Forward pass of one step. Returns (total, main, aux) tensors; aux is None when the aux path is off."""
    acts = model.encode(tape, x)
    main = task_loss(model.task, model.task_head(tape, acts[-1]), y)
    if lam == 0 or x_a is None:
        return main, main, None
    acts_a = model.encode(tape, x_a)
    mode = model.aggregation
    prob = model.discriminate(tape, feature_stats(acts, mode), feature_stats(acts_a, mode))
    aux = nn.loss_bce(prob, np.asarray(t_a, dtype=np.float64).reshape(-1, 1))
    return vat_total_loss(main, aux, lam), main, aux


def train_step(model: VatModel, batch, aux_batch, state: nn.AdamState, lam: float) -> StepLosses:
    """One Siamese forward, one backward on the total loss, one Adam update.

    ``batch`` is (images, targets); ``aux_batch`` is (images, t_a) aligned 1:1, or None.
    """
    x, y = batch
    x_a, t_a = aux_batch if aux_batch is not None else (None, None)
    if x_a is not None and len(x_a) != len(x):
        raise ValueError(f"aux batch of {len(x_a)} does not align with batch of {len(x)}")
    params = model.params
    for p in params:
        p.zero_grad()
    tape = Tape()
    total, main, aux = build_loss(model, tape, x, y, x_a, t_a, lam)
    if not np.isfinite(total.item()):
        raise NonFiniteLossError(f"non-finite loss at optimizer step {state.t + 1}: main={main.item()}, aux={aux.item() if aux is not None else None}")
    tape.backward(total)
    nn.adam_step(params, state)
    return StepLosses(main.item(), aux.item() if aux is not None else float("nan"), total.item())


def evaluate(model: VatModel, subset: Subset) -> float:
    """Task metric (higher is better): AUC for binary, quadratic kappa for ordinal."""
    s = model.scores(subset.images)
    if model.task == "binary":
        return metric_auc(s, subset.targets)
    grades = np.clip(np.rint(s), 0, N_GRADES - 1)
    return metric_kappa_qw(grades, subset.targets, N_GRADES)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    aux_bce: float
    total_loss: float
    val_metric: float
    feature_gap: float


@dataclass
class TrainState:
    model: VatModel
    optimizer: nn.AdamState
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    best_params: dict = field(default_factory=dict, repr=False)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams so disabling the aux path leaves the others untouched."""
    names = ("shuffle", "aux", "init", "augment")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def fit(splits: DatasetSplit, config: VatConfig, model: Optional[VatModel] = None):
    """Train with early stopping on X_val. Returns (TrainState, list[EpochRow]).

    Best-validation parameters are restored unless ``config.restore_best`` is False.
    """
    config.validate()
    for name in ("tr", "val"):
        if len(getattr(splits, name)) == 0:
            raise ConfigError(f"X_{name} is empty")
    use_aux = config.lam > 0
    if use_aux and (len(splits.tr) < 2 or len(splits.pre) < 1):
        raise ConfigError("the aux path needs |X_tr| >= 2 and a non-empty X_pre")
    rngs = rng_streams(config.seed)
    if model is None:
        model = VatModel(config.arch, config.aggregation, config.task)
    model.init(rngs["init"])
    state = TrainState(model, nn.AdamState(lr=config.lr))
    tr, pre = splits.tr, splits.pre
    history: list[EpochRow] = []

    for epoch in range(1, config.max_epochs + 1):
        order = rngs["shuffle"].permutation(len(tr))
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = augment_batch(tr.images[idx], config.augment, rngs["augment"])
            aux = None
            if use_aux:
                draws = [sample_auxiliary(int(i), tr, pre, rngs["aux"]) for i in idx]
                x_a = augment_batch(np.stack([d.image for d in draws]), config.augment, rngs["augment"])
                aux = (x_a, np.array([d.t_a for d in draws], dtype=np.float64))
            losses = train_step(model, (x, tr.targets[idx]), aux, state.optimizer, config.lam)
            sums += (losses.main, losses.aux_bce, losses.total)
            batches += 1
        means = sums / batches
        val = evaluate(model, splits.val)
        gap = feature_gap(model, tr, splits.val) if config.track_feature_gap and len(tr) >= 2 and len(splits.val) >= 2 else float("nan")
        history.append(EpochRow(epoch, means[0], means[1], means[2], val, gap))
        state.epoch = epoch
        if val > state.best_metric:
            state.best_metric = val
            state.best_epoch = epoch
            state.best_params = model.state_dict()
            state.since_improvement = 0
        else:
            state.since_improvement += 1
            if state.since_improvement >= config.patience:
                break
    if config.restore_best:
        model.load_state_dict(state.best_params)
    return state, history


def heldout_discriminator_bce(model: VatModel, anchors: Subset, same: Subset, other: Subset, n_pairs: int, seed: int) -> float:
    """Discriminator BCE on pairs built as in training but from images it never saw.

    Anchors play the X_tr role; partners with label 1 come from ``same``, label 0 from ``other``.
    """
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, len(anchors), size=n_pairs)
    draws = [sample_auxiliary(int(i), same, other, rng) if same is anchors else _draw_from(same, other, rng) for i in ia]
    x = anchors.images[ia]
    x_a = np.stack([d.image for d in draws])
    t = np.array([d.t_a for d in draws], dtype=np.float64)
    mode = model.aggregation
    prob = model.discriminate(None, feature_stats(model.encode(None, x), mode), feature_stats(model.encode(None, x_a), mode))
    return nn.loss_bce(prob, t.reshape(-1, 1)).item()


def _draw_from(same: Subset, other: Subset, rng) -> AuxSample:
    if rng.uniform() <= 0.5:
        j = int(rng.integers(0, len(same)))
        return AuxSample(same.images[j], 1, j)
    j = int(rng.integers(0, len(other)))
    return AuxSample(other.images[j], 0, j)


def clone_model(model: VatModel) -> VatModel:
    return copy.deepcopy(model)
