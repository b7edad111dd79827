"""Minimal dense-tensor engine with reverse-mode differentiation.

Only the handful of operations the compression pipelines need are provided:
matrix products, broadcasting add/sub/mul, ReLU, row gathers, column
concatenation and a segment aggregation (mean, max, min) used as the
permutation-invariant pooling of every message-passing step.

Computation runs in float32 by default. Casting a :class:`ParamStore` to
float64 (``params.astype(np.float64)``) switches every downstream operation
to double precision, which is what the finite-difference checks use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-d array that optionally records how it was computed."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    av, bv = a.data, b.data
    return _result(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


ROW_BLOCK = 16


def _rowwise_product(av: np.ndarray, bv: np.ndarray) -> np.ndarray:
    # BLAS takes a different code path for the trailing rows when the row count
    # is not a multiple of its block size, so a row's result could depend on its
    # position. Zero-padding to a full block keeps every row on one path.
    m = av.shape[0]
    short = -m % ROW_BLOCK
    if short:
        av = np.concatenate([av, np.zeros((short, av.shape[1]), dtype=av.dtype)])
        return (av @ bv)[:m]
    return av @ bv


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product whose forward rows do not depend on their row position."""
    av, bv = a.data, b.data
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} and {bv.shape} do not align")
    return _result(_rowwise_product(av, bv), (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=a.dtype),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].data.ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def _scatter_rows(g: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows,) + g.shape[1:], dtype=g.dtype)
    if len(index) < 256:
        np.add.at(out, index, g)
        return out
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.intp)
    n_rows = a.shape[0]
    return _result(a.data[index], (a,), lambda g: (_scatter_rows(g, index, n_rows),))


def _content_order(v: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Row order by segment, then by row contents (first column most significant)."""
    if v.shape[1] == 0:
        return np.argsort(seg, kind="stable")
    order = np.lexsort((v[:, 0], seg))
    s, c = seg[order], v[order, 0]
    if np.any((s[1:] == s[:-1]) & (c[1:] == c[:-1])):
        # ties in the first column; fall back to the whole row
        order = np.lexsort((*v.T[::-1], seg))
    return order


def segment_aggregate(a: Tensor, segments, n_segments: int) -> Tensor:
    """Concatenated element-wise mean, max and min of the rows of each segment.

    ``a`` has shape (n, D) and ``segments[i]`` names the segment of row ``i``.
    The result has shape (n_segments, 3 * D); segments without rows yield zeros.
    Rows are put in a content-defined order inside each segment before the
    sum, so the output is bitwise independent of the order rows are listed in.
    Gradients of max/min are split evenly between tied rows.
    """
    v = a.data
    if v.ndim != 2:
        raise DimensionError(f"segment_aggregate expects a matrix, got shape {v.shape}")
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape != (v.shape[0],):
        raise DimensionError(f"{seg.shape[0]} segment ids for {v.shape[0]} rows")
    n, width = v.shape
    out = np.zeros((n_segments, 3 * width), dtype=v.dtype)
    if n == 0:
        return _result(out, (a,), lambda g: (np.zeros((0, width), dtype=g.dtype),))

    order = _content_order(v, seg)
    rows = v[order]
    sorted_seg = seg[order]
    counts = np.bincount(seg, minlength=n_segments)
    filled = np.flatnonzero(counts)
    starts = (np.cumsum(counts) - counts)[filled]
    sizes = counts[filled].astype(v.dtype)[:, None]
    hi = np.maximum.reduceat(rows, starts, axis=0)
    lo = np.minimum.reduceat(rows, starts, axis=0)
    out[filled, :width] = np.add.reduceat(rows, starts, axis=0) / sizes
    out[filled, width : 2 * width] = hi
    out[filled, 2 * width :] = lo

    def backward(g):
        gs = g[sorted_seg]
        gsorted = gs[:, :width] / counts[sorted_seg].astype(g.dtype)[:, None]
        for block, extreme in ((slice(width, 2 * width), hi), (slice(2 * width, None), lo)):
            full = np.zeros((n_segments, width), dtype=v.dtype)
            full[filled] = extreme
            hit = rows == full[sorted_seg]
            share = gs[:, block] * hit
            if np.count_nonzero(hit) != hit.shape[1] * len(filled):
                ties = np.zeros((n_segments, width), dtype=g.dtype)
                ties[filled] = np.add.reduceat(hit.astype(g.dtype), starts, axis=0)
                share /= np.maximum(ties[sorted_seg], 1)
            gsorted += share
        gx = np.empty_like(gsorted)
        gx[order] = gsorted
        return (gx,)

    return _result(out, (a,), backward)


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - _as_tensor(target, pred.dtype)
    return mean(diff * diff)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` for every named leaf it depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    named: dict[str, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                named[node.name] = Tensor(g, dtype=node.dtype)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return named


# ---------------------------------------------------------------------------
# parameters and MLPs


class ParamStore(dict):
    """Named learnable tensors, keyed like ``"decoder.0.weight"``."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] | dict = ()):
        super().__init__()
        for name, value in dict(items).items():
            self[name] = value

    def __setitem__(self, name, value):
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.name = name
        t.requires_grad = True
        super().__setitem__(name, t)

    @property
    def dtype(self):
        for t in self.values():
            return t.dtype
        return np.dtype(DEFAULT_DTYPE)

    def slice(self, prefix: str) -> "ParamStore":
        head = prefix + "."
        return ParamStore({k: v for k, v in self.items() if k.startswith(head)})

    def copy(self) -> "ParamStore":
        return ParamStore({k: Tensor(v.data.copy()) for k, v in self.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(v.data.astype(dtype)) for k, v in self.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def count(self) -> int:
        return int(sum(v.data.size for v in self.values()))


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, e.g. ``(10, 20, 20)``.

    Hidden layers use ReLU; the final layer is linear unless
    ``final_activation`` is ``"relu"``.
    """

    widths: tuple[int, ...]
    final_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ContractError("an MLP needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ContractError(f"MLP widths must be positive: {self.widths}")
        if self.final_activation not in ("identity", "relu"):
            raise ContractError(f"unknown activation {self.final_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str, dtype=DEFAULT_DTYPE) -> ParamStore:
    """Glorot-uniform weights and zero biases for every layer of ``spec``."""
    store = ParamStore()
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        store[f"{prefix}.{i}.weight"] = Tensor(w.astype(dtype))
        store[f"{prefix}.{i}.bias"] = Tensor(np.zeros(fan_out, dtype=dtype))
    return store


def mlp_forward(spec: MlpSpec, params: ParamStore, x, prefix: str) -> Tensor:
    """Apply the MLP stored under ``prefix`` to the last axis of ``x``."""
    x = _as_tensor(x, params.dtype)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    if x.shape[-1] != spec.widths[0]:
        raise DimensionError(
            f"{prefix}: layer 0 expects input width {spec.widths[0]}, got {x.shape[-1]}"
        )
    h = x
    for i in range(spec.n_layers):
        try:
            w = params[f"{prefix}.{i}.weight"]
            b = params[f"{prefix}.{i}.bias"]
        except KeyError as exc:
            raise DimensionError(f"{prefix}: missing parameters for layer {i}") from exc
        if w.shape != (spec.widths[i], spec.widths[i + 1]) or b.shape != (spec.widths[i + 1],):
            raise DimensionError(
                f"{prefix}: layer {i} parameters have shapes {w.shape}/{b.shape}, "
                f"expected ({spec.widths[i]}, {spec.widths[i + 1]})"
            )
        h = matmul(h, w) + b
        if i < spec.n_layers - 1 or spec.final_activation == "relu":
            h = relu(h)
    if squeeze:
        h = reshape(h, (h.shape[1],))
    return h


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    """Adam with bias correction. Parameters without a gradient are left alone."""

    lr: float = 0.003
    eps: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def step(self, params: ParamStore, grads: dict[str, Tensor]) -> ParamStore:
        self.step_count += 1
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            t = self.t[name] = self.t.get(name, 0) + 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            # bias corrections folded into scalars: lr_t * m / (sqrt(v) / c2 + eps)
            lr_t = self.lr / (1 - self.beta1**t)
            c2 = np.sqrt(1 - self.beta2**t)
            denom = np.sqrt(v)
            denom /= c2
            denom += self.eps
            p.data = p.data - (lr_t * m / denom).astype(p.dtype)
        return params
