"""Layers, losses, initialization and Adam on top of :mod:`vatlab.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Parameter, Tape, Tensor

BCE_CLAMP = 1e-7
DICE_SMOOTH = 1.0


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, param: str, step: int):
        super().__init__(f"non-finite gradient in parameter {param!r} at optimizer step {step}")
        self.param = param
        self.step = step


grl = ad.grl


def bind(tape: Optional[Tape], p: Parameter) -> Tensor:
    """Parameter as a tape leaf, or as a constant when running untaped."""
    return Tensor(p.value) if tape is None else tape.param(p)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv-block | mlp-head | task-head
    fan_in: int
    fan_out: int
    activation: Optional[str] = "relu"
    kernel: int = 3

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError(f"fan_in and fan_out must be >= 1, got {self.fan_in}, {self.fan_out}")


class Dense:
    def __init__(self, name: str, spec: LayerSpec):
        self.spec = spec
        self.weight = Parameter(f"{name}.weight", np.zeros((spec.fan_in, spec.fan_out)))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.fan_out))

    @property
    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, tape: Optional[Tape], x: Tensor) -> Tensor:
        return dense_forward(tape, x, self)


def dense_forward(tape: Optional[Tape], x: Tensor, layer: Dense) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.spec.fan_in:
        raise DimensionError(f"dense: input {x.shape} does not match fan_in={layer.spec.fan_in}")
    z = ad.add_bias(ad.matmul(x, bind(tape, layer.weight)), bind(tape, layer.bias))
    return ad.activation(z, layer.spec.activation)


class ConvBlock:
    """conv kxk 'same' -> relu -> 2x2 max-pool."""

    def __init__(self, name: str, spec: LayerSpec):
        self.spec = spec
        k = spec.kernel
        self.weight = Parameter(f"{name}.weight", np.zeros((spec.fan_out, spec.fan_in, k, k)))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.fan_out))

    @property
    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, tape: Optional[Tape], x: Tensor) -> Tensor:
        z = ad.add_bias(ad.conv2d(x, bind(tape, self.weight), "same"), bind(tape, self.bias), axis=1)
        return ad.maxpool2d(ad.activation(z, self.spec.activation), 2)


def init_params(layers: Sequence, seed) -> None:
    """Fan-in scaled uniform init: He bounds for relu layers, Glorot otherwise. Biases start at zero.

    ``seed`` may be an int or a ``numpy.random.Generator``; layers are visited in order.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for layer in layers:
        w = layer.weight.value
        receptive = int(np.prod(w.shape[2:])) if w.ndim == 4 else 1
        fan_in = layer.spec.fan_in * receptive
        fan_out = layer.spec.fan_out * receptive
        if layer.spec.activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        layer.weight.value = rng.uniform(-bound, bound, size=w.shape)
        layer.bias.value = np.zeros_like(layer.bias.value)
        layer.weight.zero_grad()
        layer.bias.zero_grad()


# ---------------------------------------------------------------- losses


def loss_bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1.0 - BCE_CLAMP)
    n = p.size
    value = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))

    def backward(g):
        return (g * inside * (p - t) / (p * (1.0 - p)) / n,)

    return ad._apply("bce", np.asarray(value), (pred,), backward)


def loss_mae(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"mae: prediction {pred.shape} and target {t.shape} differ")
    diff = pred.data - t
    n = diff.size
    return ad._apply("mae", np.asarray(np.abs(diff).mean()), (pred,), lambda g: (g * np.sign(diff) / n,))


def loss_dice_macro(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean over foreground classes of the smoothed soft Dice, pooled over batch and pixels."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape or pred.ndim != 4:
        raise DimensionError(f"dice: prediction {pred.shape} and target {t.shape} must match as [B,K,H,W]")
    K = pred.shape[1]
    if K < 2:
        raise ValueError("dice loss needs at least 2 classes (class 0 is background)")
    if smooth <= 0:
        raise ValueError("smoothing must be positive")
    P, T = pred.data[:, 1:], t[:, 1:]
    axes = (0, 2, 3)
    inter = (P * T).sum(axis=axes)
    denom = P.sum(axis=axes) + T.sum(axis=axes) + smooth
    numer = 2.0 * inter + smooth
    value = 1.0 - np.mean(numer / denom)

    def backward(g):
        # d(numer/denom)/dP = 2T/denom - numer/denom^2
        d = (2.0 * T / denom[None, :, None, None]) - (numer / denom**2)[None, :, None, None]
        full = np.zeros_like(pred.data)
        full[:, 1:] = -g * d / (K - 1)
        return (full,)

    return ad._apply("dice", np.asarray(value), (pred,), backward)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> AdamState:
    """One bias-corrected Adam update using each parameter's accumulated ``grad``."""
    step = state.t + 1
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(p.name, step)
    state.t = step
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m = state.beta1 * m + (1.0 - state.beta1) * p.grad
        v = state.beta2 * state.v[p.name] + (1.0 - state.beta2) * p.grad**2
        state.m[p.name] = m
        state.v[p.name] = v
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
