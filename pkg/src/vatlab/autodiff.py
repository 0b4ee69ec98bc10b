"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation below works on :class:`Tensor` objects. When at least one input
belongs to a :class:`Tape`, the result is recorded on that tape together with a
closure computing the vector-Jacobian product; otherwise the result is a plain
constant and nothing is recorded. That makes the same model code usable for
training (taped) and for evaluation / finite differences (untaped).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateReductionError(ValueError):
    """Raised when a reduction is undefined for the given extent (e.g. variance of one value)."""


class TapeError(RuntimeError):
    """Raised on contract violations of the tape (non-scalar root, replayed backward, mixed tapes)."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Parameter:
    """A named trainable array with its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass
class Node:
    op: str
    parents: tuple[Optional[int], ...]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    value: np.ndarray
    param: Optional[Parameter] = None


class Tape:
    """Ordered record of one forward pass; supports exactly one backward sweep."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: Optional[list[Optional[np.ndarray]]] = None
        self._param_nodes: dict[str, tuple[Parameter, int]] = {}

    def leaf(self, data, op: str = "leaf") -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        self.nodes.append(Node(op, (), None, data))
        return Tensor(data, self, len(self.nodes) - 1)

    def param(self, p: Parameter) -> Tensor:
        """Bind a parameter to this tape. Repeated calls return the same leaf node."""
        hit = self._param_nodes.get(p.name)
        if hit is not None:
            if hit[0] is not p:
                raise TapeError(f"two distinct parameters share the name {p.name!r}")
            return Tensor(p.value, self, hit[1])
        self.nodes.append(Node("param", (), None, p.value, p))
        idx = len(self.nodes) - 1
        self._param_nodes[p.name] = (p, idx)
        return Tensor(p.value, self, idx)

    @property
    def parameters(self) -> list[Parameter]:
        return [p for p, _ in self._param_nodes.values()]

    def record(self, op, value, parents, backward) -> Tensor:
        for pid in parents:
            if pid is not None and pid >= len(self.nodes):
                raise TapeError("parent recorded after child")
        self.nodes.append(Node(op, tuple(parents), backward, value))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(node) for every node; parameter grads are summed into ``Parameter.grad``."""
        if self.grads is not None:
            raise TapeError("backward already ran on this tape; re-run the forward pass")
        if root.tape is not self:
            raise TapeError("root tensor is not recorded on this tape")
        if root.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[root.node] = np.ones_like(root.data)
        for i in range(root.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        self.grads = grads
        for p, idx in self._param_nodes.values():
            if grads[idx] is not None:
                p.grad = p.grad + grads[idx]

    def grad(self, t: Tensor) -> np.ndarray:
        if self.grads is None:
            raise TapeError("backward has not run yet")
        g = self.grads[t.node]
        return np.zeros_like(t.data) if g is None else g


def _apply(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    return tape.record(op, value, [t.node if t.tape is tape else None for t in inputs], backward)


def _tracked(t: Tensor) -> bool:
    return t.tape is not None


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if _tracked(a) else None, A.T @ g if _tracked(b) else None)

    return _apply("matmul", A @ B, (a, b), backward)


def _pad_amount(padding: str, kh: int, kw: int) -> tuple[int, int, int, int]:
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "same":
        return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2
    raise ValueError(f"unknown padding mode {padding!r}")


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation of ``x [N,C,H,W]`` with ``w [F,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    top, bottom, left, right = _pad_amount(padding, kh, kw)
    if kh > H + top + bottom or kw > W + left + right:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # cols: [N*Ho*Wo, C*kh*kw]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, -1)
    wmat = w.data.reshape(F, -1)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, F)
        gw = (gmat.T @ cols).reshape(w.shape) if _tracked(w) else None
        gx = None
        if _tracked(x):
            dcols = (gmat @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho, j : j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, top : top + H, left : left + W]
        return gx, gw

    return _apply("conv2d", np.ascontiguousarray(out), (x, w), backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum in row-major window order."""
    N, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"maxpool2d: spatial extents {H}x{W} not divisible by {size}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    cands = [x.data[:, :, i::size, j::size] for i, j in offsets]
    out = cands[0].copy()
    for c in cands[1:]:
        np.maximum(out, c, out=out)

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), c in zip(offsets, cands):
            sel = (c == out) & ~taken
            taken |= sel
            gx[:, :, i::size, j::size] = g * sel
        return (gx,)

    return _apply("maxpool2d", out, (x,), backward)


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _apply("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _apply("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: Optional[str]) -> Tensor:
    if kind is None or kind == "none":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly zero is taken as zero (a zero spread stays a stable point)."""
    r = np.sqrt(x.data)
    safe = np.where(r > 0, r, 1.0)

    def backward(g):
        return (np.where(r > 0, 0.5 * g / safe, 0.0),)

    return _apply("sqrt", r, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _apply("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _apply("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _apply("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` (last axis for dense outputs, 1 for channels)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _apply("add_bias", x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)))


def grl(x: Tensor) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient multiplied by -1 backward."""
    return _apply("grl", x.data, (x,), lambda g: (-g,))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _apply("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axes: Sequence[int] = (2, 3)) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / n,)

    return _apply("mean", out, (x,), backward)


def variance(x: Tensor, axes: Sequence[int] = (2, 3)) -> Tensor:
    """Unbiased (n-1) variance over ``axes``."""
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n < 2:
        raise DegenerateReductionError(f"variance over {n} element(s) along axes {axes} of {x.shape}")
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    out = (centered**2).sum(axis=axes) / (n - 1)

    def backward(g):
        return (np.expand_dims(g, axes) * centered * (2.0 / (n - 1)),)

    return _apply("variance", out, (x,), backward)


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref.shape} along axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _apply("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _apply("reshape", out, (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor, start: int = 1) -> Tensor:
    """Row-major flatten of all axes from ``start`` on (``start=0`` gives a 1-D tensor)."""
    return reshape(x, x.shape[:start] + (-1,))


# ---------------------------------------------------------------- checking


def kink_margin(tape: Tape) -> float:
    """Distance of the recorded forward pass from the nearest non-differentiable point.

    Looks at relu inputs (distance from 0), sqrt inputs (distance from 0) and
    max-pool windows (gap between the largest and the runner-up value, ignoring
    exact ties, which only arise from constant upstream values).
    """
    margin = np.inf
    for node in tape.nodes:
        if node.op in ("relu", "sqrt"):
            margin = min(margin, float(np.min(np.abs(tape.nodes[node.parents[0]].value))))
        elif node.op == "maxpool2d":
            x = tape.nodes[node.parents[0]].value
            N, C, H, W = x.shape
            s = H // node.value.shape[2]
            windows = x.reshape(N, C, H // s, s, W // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(-1, s * s)
            top2 = np.sort(windows, axis=1)[:, -2:]
            gap = top2[:, 1] - top2[:, 0]
            gap = gap[gap > 0]
            if gap.size:
                margin = min(margin, float(gap.min()))
    return margin


def _rel_err(analytic, numeric) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, sign: float = 1.0) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``f`` must build its result only from ops in this module so it can run both
    taped (analytic gradient) and untaped (central differences). ``sign=-1``
    compares against the negated numeric gradient, for paths that pass through
    gradient reversal.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x)
    out = f(leaf)
    tape.backward(out)
    analytic = tape.grad(leaf).reshape(-1)

    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(x)).item()
        flat[i] = orig - eps
        down = f(Tensor(x)).item()
        flat[i] = orig
        worst = max(worst, _rel_err(analytic[i], sign * (up - down) / (2 * eps)))
    return worst


def param_grad_check(
    loss_fn: Callable[[Optional[Tape]], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    reference: Optional[Callable[[Parameter], Callable[[], float]]] = None,
) -> float:
    """Same error measure as :func:`grad_check`, taken over every coordinate of ``params``.

    ``loss_fn(tape)`` rebuilds the scalar loss, binding parameters to ``tape``
    (or as constants when ``tape`` is None). ``reference(p)`` may supply the
    objective whose central differences the gradient of ``p`` must match;
    by default it is ``loss_fn`` itself.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    worst = 0.0
    for p in params:
        objective = reference(p) if reference is not None else (lambda: loss_fn(None).item())
        analytic = p.grad.reshape(-1).copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = objective()
            flat[i] = orig - eps
            down = objective()
            flat[i] = orig
            worst = max(worst, _rel_err(analytic[i], (up - down) / (2 * eps)))
        p.zero_grad()
    return worst
