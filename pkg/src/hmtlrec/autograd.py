"""Small reverse-mode autodiff over numpy arrays.

Only the operations the recommender needs are provided: lookups, affine maps,
attention building blocks, layer normalization, softmax and cross-entropy.
Training runs in float32; gradient verification switches to float64 through
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_state = {"dtype": np.dtype(np.float32), "debug": False, "grad": True}


class ShapeError(ValueError):
    pass


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and parameters."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Raise FloatingPointError as soon as an op produces NaN/Inf."""
    old = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = old


def is_debug() -> bool:
    return _state["debug"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not isinstance(node, Parameter):
                    # intermediate buffers are not needed after propagation
                    node.grad = None

    # operator sugar for tests and small expressions
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable tensor with a stable name and an always-present gradient buffer."""

    __slots__ = ()

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        if self.grad is None or self.grad.shape != self.data.shape:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0
    active = a.data > 0

    def backward(g):
        a._accumulate(g * active)

    return _result(np.where(active, a.data, a.data.dtype.type(0)), (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)

    def backward(g):
        a._accumulate(g * keep)

    return _result(a.data * keep, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # collapse the batch dims into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb)

    return _result(a.data @ b.data, (a, b), backward)


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input width {x.shape[-1]} vs weight {weight.shape}")
    out = matmul(x, weight)
    if bias is None:
        return out
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias shape {bias.shape} vs output width {weight.shape[1]}")
    return add(out, bias)


# ---------------------------------------------------------------- lookups


def embedding(table: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table with {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(grad)

    return _result(table.data[index], (table,), backward)


def embedding_bag_mean(table: Tensor, indices, segments, weights, n_segments: int) -> Tensor:
    """Weighted sum of table rows per segment: ``out[segments[j]] += weights[j] * table[indices[j]]``.

    Mean pooling is obtained by passing ``weights = 1/len(bag)``; empty bags give zero rows.
    """
    indices = np.asarray(indices, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    w = np.asarray(weights, dtype=table.dtype)[:, None]
    out = np.zeros((n_segments, table.shape[1]), dtype=table.dtype)
    if indices.size:
        np.add.at(out, segments, table.data[indices] * w)

    def backward(g):
        grad = np.zeros_like(table.data)
        if indices.size:
            np.add.at(grad, indices, g[segments] * w)
        table._accumulate(grad)

    return _result(out, (table,), backward)


# ---------------------------------------------------------------- normalization / pooling


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis 1 of a (batch, length, width) tensor, counting only mask==True positions."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("masked_mean: a row has no valid positions")
    w = (mask / counts).astype(x.dtype)[:, :, None]

    def backward(g):
        x._accumulate(g[:, None, :] * w)

    return _result((x.data * w).sum(axis=1), (x,), backward)


# ---------------------------------------------------------------- softmax family


def _softmax_np(z: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(scores: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get exactly zero weight."""
    scores = as_tensor(scores)
    if scores.ndim == 0 or scores.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, scores.shape).any(axis=-1)):
            raise ValueError("masked_softmax: a row has no valid positions")
    p = _softmax_np(scores.data, mask)

    def backward(g):
        scores._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (scores,), backward)


def softmax(scores) -> Tensor:
    return masked_softmax(as_tensor(scores), None)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows, computed in log space.

    Accepts a single score vector with an integer target or a (batch, classes)
    matrix with one target per row.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {z.shape[0]} rows")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise IndexError(f"cross_entropy: target out of range for {z.shape[1]} classes")
    logp = log_softmax_np(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, t].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= g / z.shape[0]
        logits._accumulate(d[0] if single else d)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update in place, using each parameter's ``grad``."""
    if _state["debug"]:
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.data.shape:
            raise ShapeError(f"Adam moments for {p.name!r} have shape {m.shape}, parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


# ---------------------------------------------------------------- gradient checking


@dataclass
class Probe:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    excluded: bool = False


@dataclass
class GradCheckReport:
    tolerance: float
    probes: list[Probe]

    @property
    def checked(self) -> list[Probe]:
        return [p for p in self.probes if not p.excluded]

    @property
    def excluded(self) -> list[Probe]:
        return [p for p in self.probes if p.excluded]

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.checked), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.checked) and self.max_rel_error <= self.tolerance

    def worst(self, n: int = 5) -> list[Probe]:
        return sorted(self.checked, key=lambda p: p.rel_error, reverse=True)[:n]

    def params_covered(self) -> set[str]:
        return {p.param for p in self.checked}

    def summary(self) -> str:
        lines = [
            f"probes={len(self.probes)} checked={len(self.checked)} excluded={len(self.excluded)} "
            f"max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.1e} "
            f"{'PASS' if self.passed else 'FAIL'}"
        ]
        for p in self.worst():
            lines.append(f"  {p.param}{list(p.index)} analytic={p.analytic:.6e} "
                         f"numeric={p.numeric:.6e} rel={p.rel_error:.2e}")
        for p in self.excluded[:5]:
            lines.append(f"  excluded (non-differentiable) {p.param}{list(p.index)}")
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_probes: int = 100,
    tolerance: float = 1e-3,
    step: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences on random coordinates.

    Probes are spread round-robin over ``params`` so every tensor is visited.
    Half of each tensor's probes are drawn among coordinates with a nonzero
    analytic gradient (sparse lookups would otherwise mostly hit zeros).
    A probe whose one-sided slopes disagree more than the central estimate
    disagrees with the analytic value sits on a kink; it is excluded and
    reported rather than counted.
    """
    if not params:
        raise ValueError("finite_difference_check needs at least one parameter")
    for p in params:
        if isinstance(p, Parameter):
            p.zero_grad()
        else:
            p.grad = None
    base = loss_fn()
    base.backward()
    f0 = float(base.data)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    rng = np.random.default_rng(seed)
    counts = [n_probes // len(params) + (i < n_probes % len(params)) for i in range(len(params))]
    probes: list[Probe] = []
    with no_grad():
        for p, count in zip(params, counts):
            grad = analytic[id(p)]
            nonzero = np.flatnonzero(grad)
            for j in range(count):
                if j % 2 == 1 and nonzero.size:
                    flat = int(rng.choice(nonzero))
                else:
                    flat = int(rng.integers(p.data.size))
                idx = np.unravel_index(flat, p.shape)
                orig = p.data[idx].copy()
                p.data[idx] = orig + step
                fp = float(loss_fn().data)
                p.data[idx] = orig - step
                fm = float(loss_fn().data)
                p.data[idx] = orig
                numeric = (fp - fm) / (2 * step)
                a = float(grad[idx])
                err = relative_error(a, numeric, floor)
                kink = False
                if err > tolerance:
                    one_sided_gap = abs((fp - f0) / step - (f0 - fm) / step)
                    kink = one_sided_gap >= abs(numeric - a)
                probes.append(Probe(p.name or f"param{params.index(p)}", tuple(int(i) for i in idx),
                                    a, numeric, err, excluded=kink))
    return GradCheckReport(tolerance, probes)


def uniform_init(rng: np.random.Generator, shape, bound: float, name: str) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)


def fan_in_init(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=name)


def zeros(shape, name: str) -> Parameter:
    return Parameter(np.zeros(shape), name=name)


def ones(shape, name: str) -> Parameter:
    return Parameter(np.ones(shape), name=name)
