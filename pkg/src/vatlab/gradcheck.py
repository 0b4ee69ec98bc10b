"""Finite-difference suite covering every differentiable op and the full VAT loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, grad_check, param_grad_check
from .vat import ArchConfig, VatModel, build_loss, feature_stats

TOLERANCE = 1e-4
EPS = 1e-5
# instances closer than this to a relu/max-pool kink are redrawn: central
# differences are only meaningful where the function is smooth
KINK_MARGIN = 1e-3


@dataclass
class CaseResult:
    name: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _op_case(make: Callable, sign: float = 1.0) -> Callable[[np.random.Generator], float]:
    """``make(rng) -> (f, x)`` where f maps the checked input to a Tensor output."""

    def draw(rng):
        f, x = make(rng)
        w = Tensor(rng.uniform(-1.0, 1.0, size=f(Tensor(x)).shape))

        def loss(arg):
            t = arg.leaf(x) if isinstance(arg, ad.Tape) else arg
            return ad.sum(ad.mul(f(t), w))

        return loss, x

    def run(rng):
        loss, x = smooth_instance(draw, rng)
        return grad_check(loss, x, EPS, sign)

    return run


def _cases() -> dict[str, Callable[[np.random.Generator], float]]:
    c = {}
    c["matmul/a"] = _op_case(lambda r: ((lambda t, b=Tensor(_u(r, 4, 3)): ad.matmul(t, b)), _u(r, 2, 4)))
    c["matmul/b"] = _op_case(lambda r: ((lambda t, a=Tensor(_u(r, 2, 4)): ad.matmul(a, t)), _u(r, 4, 3)))
    c["conv2d/x-same"] = _op_case(lambda r: ((lambda t, w=Tensor(_u(r, 3, 2, 3, 3)): ad.conv2d(t, w, "same")), _u(r, 2, 2, 5, 5)))
    c["conv2d/w-same"] = _op_case(lambda r: ((lambda t, x=Tensor(_u(r, 2, 2, 5, 5)): ad.conv2d(x, t, "same")), _u(r, 3, 2, 3, 3)))
    c["conv2d/x-valid"] = _op_case(lambda r: ((lambda t, w=Tensor(_u(r, 2, 2, 3, 2)): ad.conv2d(t, w, "valid")), _u(r, 1, 2, 5, 4)))
    c["conv2d/w-valid"] = _op_case(lambda r: ((lambda t, x=Tensor(_u(r, 1, 2, 5, 4)): ad.conv2d(x, t, "valid")), _u(r, 2, 2, 3, 2)))
    c["maxpool2d"] = _op_case(lambda r: (lambda t: ad.maxpool2d(t, 2), _u(r, 2, 2, 4, 4)))
    c["relu"] = _op_case(lambda r: (ad.relu, _u(r, 3, 4)))
    c["sigmoid"] = _op_case(lambda r: (ad.sigmoid, _u(r, 3, 4)))
    c["sqrt"] = _op_case(lambda r: (ad.sqrt, _u(r, 3, 4, lo=0.1)))
    c["mean"] = _op_case(lambda r: (lambda t: ad.mean(t, (2, 3)), _u(r, 2, 3, 3, 4)))
    c["variance"] = _op_case(lambda r: (lambda t: ad.variance(t, (2, 3)), _u(r, 2, 3, 3, 4)))
    c["concat"] = _op_case(lambda r: ((lambda t, o=Tensor(_u(r, 2, 2)): ad.concat([t, o, t], axis=1)), _u(r, 2, 3)))
    c["flatten"] = _op_case(lambda r: (lambda t: ad.flatten(t, 1), _u(r, 2, 3, 2)))
    c["add"] = _op_case(lambda r: ((lambda t, o=Tensor(_u(r, 3, 2)): ad.add(t, ad.add(o, t))), _u(r, 3, 2)))
    c["sub"] = _op_case(lambda r: ((lambda t, o=Tensor(_u(r, 3, 2)): ad.sub(o, t)), _u(r, 3, 2)))
    c["mul"] = _op_case(lambda r: ((lambda t, o=Tensor(_u(r, 3, 2)): ad.mul(t, ad.mul(o, t))), _u(r, 3, 2)))
    c["scale"] = _op_case(lambda r: ((lambda t, k=float(r.uniform(-3, 3)): ad.scale(t, k)), _u(r, 3, 2)))
    c["add_bias"] = _op_case(lambda r: ((lambda t, x=Tensor(_u(r, 2, 3, 2, 2)): ad.add_bias(x, t, axis=1)), _u(r, 3)))
    c["grl"] = _op_case(lambda r: ((lambda t: ad.sigmoid(ad.grl(t))), _u(r, 3, 2)), sign=-1.0)
    c["bce"] = _op_case(lambda r: ((lambda t, y=r.integers(0, 2, size=(4, 1)): nn.loss_bce(ad.sigmoid(t), y)), _u(r, 4, 1)))
    c["mae"] = _op_case(lambda r: ((lambda t, y=_u(r, 5): nn.loss_mae(t, y)), _u(r, 5)))
    c["dice"] = _op_case(lambda r: ((lambda t, y=_onehot(r, 2, 3, 3, 3): nn.loss_dice_macro(ad.sigmoid(t), y)), _u(r, 2, 3, 3, 3)))
    c["dense-mlp"] = _mlp_case
    c["feature_stats"] = _op_case(_feature_stats_case)
    c["bce-discriminate/encoder-acts"] = _discriminate_case
    c["vat-total-loss/early"] = lambda r: _vat_loss_case(r, "early")
    c["vat-total-loss/late"] = lambda r: _vat_loss_case(r, "late")
    return c


def _onehot(rng, b, k, h, w):
    labels = rng.integers(0, k, size=(b, h, w))
    return np.eye(k)[labels].transpose(0, 3, 1, 2)


def _feature_stats_case(rng):
    shapes = [(2, 2, 4, 4), (2, 3, 2, 2)]
    sizes = [int(np.prod(s)) for s in shapes]

    def f(t):
        acts, start = [], 0
        flat = ad.flatten(t, 0)
        for s, n in zip(shapes, sizes):
            # slice by matmul with a selection matrix (no slicing op needed)
            sel = np.zeros((flat.shape[0], n))
            sel[start : start + n] = np.eye(n)
            acts.append(ad.reshape(ad.matmul(ad.reshape(flat, (1, -1)), Tensor(sel)), s))
            start += n
        return feature_stats(acts, "early")

    return f, _u(rng, sum(sizes))


def _make_mlp(rng):
    layers = [nn.Dense("l0", nn.LayerSpec("dense", 3, 4, "relu")), nn.Dense("l1", nn.LayerSpec("dense", 4, 1, "sigmoid"))]
    nn.init_params(layers, rng)
    for layer in layers:
        layer.bias.value = rng.uniform(-0.5, 0.5, size=layer.bias.value.shape)
    x = Tensor(_u(rng, 5, 3))
    y = rng.integers(0, 2, size=(5, 1))

    def loss(tape):
        h = x
        for layer in layers:
            h = layer(tape, h)
        return nn.loss_bce(h, y)

    return loss, [p for layer in layers for p in layer.params]


def _mlp_case(rng) -> float:
    loss, params = smooth_instance(_make_mlp, rng)
    return param_grad_check(loss, params, EPS)


TINY_ARCH = ArchConfig(image_size=8, channels=(2, 2), head_hidden=3, disc_hidden=3, disc_layers=2)


def smooth_instance(make, rng, tries: int = 200):
    """Draw ``make(rng) -> (loss_fn, payload)`` until the taped forward stays KINK_MARGIN away from kinks."""
    for _ in range(tries):
        loss_fn, payload = make(rng)
        tape = ad.Tape()
        loss_fn(tape)
        if ad.kink_margin(tape) >= KINK_MARGIN:
            return loss_fn, payload
    raise RuntimeError(f"no smooth instance found in {tries} draws")


def _make_discriminate(rng):
    model = VatModel(TINY_ARCH, "early").init(rng)
    shapes = [(3, 2, 4, 4), (3, 2, 2, 2)]
    acts_a = [Tensor(_u(rng, *s)) for s in shapes]
    t_a = rng.integers(0, 2, size=(3, 1))
    n0 = int(np.prod(shapes[0]))
    x = _u(rng, sum(int(np.prod(s)) for s in shapes))

    def f(arg):
        t = arg.leaf(x) if isinstance(arg, ad.Tape) else arg
        flat = ad.reshape(t, (1, -1))
        sel0 = np.zeros((flat.shape[1], n0))
        sel0[:n0] = np.eye(n0)
        sel1 = np.zeros((flat.shape[1], flat.shape[1] - n0))
        sel1[n0:] = np.eye(flat.shape[1] - n0)
        acts = [ad.reshape(ad.matmul(flat, Tensor(sel0)), shapes[0]), ad.reshape(ad.matmul(flat, Tensor(sel1)), shapes[1])]
        prob = model.discriminate(None, feature_stats(acts, "early"), feature_stats(acts_a, "early"))
        return nn.loss_bce(prob, t_a)

    return f, x


def _discriminate_case(rng) -> float:
    f, x = smooth_instance(_make_discriminate, rng)
    # every path from the encoder activations to the loss crosses the reversal
    return grad_check(f, x, EPS, sign=-1.0)


def _make_vat(rng, mode: str):
    model = VatModel(TINY_ARCH, mode).init(rng)
    for p in model.params:
        if p.name.endswith(".bias"):
            p.value = rng.uniform(-0.2, 0.2, size=p.value.shape)
    x = _u(rng, 2, 1, 8, 8, lo=0.0, hi=2.0)
    x_a = _u(rng, 2, 1, 8, 8, lo=0.0, hi=2.0)
    y = rng.integers(0, 2, size=(2, 1)).astype(float)
    t_a = rng.integers(0, 2, size=2)
    lam = float(rng.uniform(0.1, 2.0))
    return (lambda tape: build_loss(model, tape, x, y, x_a, t_a, lam)[0]), (model, x, y, x_a, t_a, lam)


def _vat_loss_case(rng, mode: str) -> float:
    loss, (model, x, y, x_a, t_a, lam) = smooth_instance(lambda r: _make_vat(r, mode), rng)
    disc = {p.name for layer in model.disc for p in layer.params}

    def reference(p):
        # the discriminator descends L_main + lam*BCE; encoder and head descend L_main - lam*BCE
        sign = 1.0 if p.name in disc else -1.0

        def objective():
            _, main, aux = build_loss(model, None, x, y, x_a, t_a, lam)
            return main.item() + sign * lam * aux.item()

        return objective

    return param_grad_check(loss, model.params, EPS, reference)


def run_suite(instances: int = 100, seed: int = 0, only: str | None = None) -> list[CaseResult]:
    results = []
    for k, (name, case) in enumerate(_cases().items()):
        if only and only not in name:
            continue
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        worst = max(case(rng) for _ in range(instances))
        results.append(CaseResult(name, instances, worst, time.perf_counter() - start))
    return results
