"""Define-by-run reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. Graphs
are rebuilt on each forward pass; tensors are never mutated in place once
they take part in a graph.
"""
from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError, NumericError

DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, ranking)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DTYPE)
    return arr


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with float64 accumulation.

    ``a`` may carry leading batch dimensions; ``b`` is either a plain matrix
    shared across the batch or has the same batch dimensions as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    dtype = _result_dtype(a.data, b.data)
    shared = b.ndim == 2
    # a shared right operand is one gemm over the flattened batch
    a2 = a.data.reshape(-1, a.shape[-1]) if shared else a.data
    out = np.matmul(a2.astype(np.float64, copy=False), b.data.astype(np.float64, copy=False)).astype(dtype)
    if shared:
        out = out.reshape(a.shape[:-1] + (b.shape[-1],))

    def backward(g):
        b64 = b.data.astype(np.float64, copy=False)
        if shared:
            g64 = g.reshape(-1, g.shape[-1]).astype(np.float64)
            ga = (g64 @ b64.T).reshape(a.shape)
            gb = a2.astype(np.float64, copy=False).T @ g64
        else:
            g64 = g.astype(np.float64)
            ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
            gb = np.matmul(np.swapaxes(a.data.astype(np.float64, copy=False), -1, -2), g64)
        return ga.astype(a.data.dtype), gb.astype(b.data.dtype)

    return _make(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal shapes; ``b`` may also be a scalar."""
    if b.data.ndim == 0 and a.data.ndim > 0:
        out = a.data + b.data

        def backward(g):
            return g, np.asarray(g.sum(), dtype=b.data.dtype)

        return _make(out, (a, b), backward, "add")
    _same_shape(a, b, "add")

    def backward(g):
        return g, g

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def backward(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), backward, "mul")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        _same_shape(a, b, "add")
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ArgumentError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _make(x.data * np.asarray(c, dtype=x.data.dtype), (x,), backward, "scale")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., n] + b[n]``, the one broadcast the layers need."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")

    def backward(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _make(x.data + b.data, (x, b), backward, "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward, "relu")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return _make(x.data * x.data, (x,), backward, "square")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.data.dtype),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / float(n))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) evaluated without overflow."""
    out = np.logaddexp(0.0, x.data).astype(x.data.dtype)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return (g * sig,)

    return _make(out, (x,), backward, "softplus")


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), backward, "transpose")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# probabilities


def softmax(logits: Tensor, axis=-1) -> Tensor:
    _check_finite(logits.data, "softmax logits")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (logits,), backward, "softmax")


def log_softmax(logits: Tensor, axis=-1) -> Tensor:
    _check_finite(logits.data, "log_softmax logits")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood.

    ``logits`` is either ``[C]`` with an integer target or ``[N, C]`` with
    ``N`` integer targets.
    """
    targets = np.atleast_1d(np.asarray(target))
    if logits.ndim == 1:
        if targets.size != 1:
            raise DimensionError("cross_entropy: rank-1 logits take a single target")
        rows = logits.data[None, :]
    elif logits.ndim == 2:
        if targets.shape != (logits.shape[0],):
            raise DimensionError(f"cross_entropy: {targets.shape[0]} targets for {logits.shape[0]} rows")
        rows = logits.data
    else:
        raise DimensionError(f"cross_entropy: logits must be rank 1 or 2, got {logits.shape}")
    if rows.shape[0] == 0:
        raise ArgumentError("cross_entropy: empty batch")
    n, c = rows.shape
    if not np.issubdtype(targets.dtype, np.integer) or targets.min() < 0 or targets.max() >= c:
        raise ArgumentError(f"cross_entropy: target out of range for {c} classes")
    _check_finite(rows, "cross_entropy logits")
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        grad = (p * (g / n)).astype(logits.data.dtype)
        return (grad.reshape(logits.shape),)

    return _make(out, (logits,), backward, "cross_entropy")


def dropout(x: Tensor, p: float, training: bool, rng: "Rng | np.random.Generator | None") -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    gen = rng.generator if isinstance(rng, Rng) else rng
    keep = (gen.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# structural


def concat(parts: Sequence[Tensor], axis=-1) -> Tensor:
    if not parts:
        raise DimensionError("concat: nothing to join")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts:
        if p.ndim != len(ref) or p.shape[:ax] + p.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward, "concat")


def rows_3xd(e_h: Tensor, e_r: Tensor, e_t: Tensor) -> Tensor:
    """Stack three ``[..., d]`` vectors into ``[..., d, 3]`` (row i = h[i], r[i], t[i])."""
    if not (e_h.shape == e_r.shape == e_t.shape):
        raise DimensionError(f"rows_3xd: lengths {e_h.shape}, {e_r.shape}, {e_t.shape} differ")

    def backward(g):
        return g[..., 0], g[..., 1], g[..., 2]

    out = np.stack([e_h.data, e_r.data, e_t.data], axis=-1)
    return _make(out, (e_h, e_r, e_t), backward, "rows_3xd")


def join(parts: Sequence[Tensor], mode: str = "vector_concat") -> Tensor:
    if mode == "vector_concat":
        if any(p.ndim != 1 for p in parts):
            raise DimensionError("join: vector_concat needs rank-1 parts")
        return concat(parts, axis=0)
    if mode == "rows_3xd":
        if len(parts) != 3 or any(p.ndim != 1 for p in parts):
            raise DimensionError("join: rows_3xd needs exactly three rank-1 parts")
        return rows_3xd(*parts)
    raise ArgumentError(f"unknown join mode {mode!r}")


def conv_triple_rows(a: Tensor, filters: Tensor) -> Tensor:
    """Slide each 1x3 filter down the rows of ``a[..., d, 3]`` -> ``[..., d, tau]``."""
    if a.ndim < 2 or a.shape[-1] != 3:
        raise DimensionError(f"conv_triple_rows: input must have 3 columns, got {a.shape}")
    if filters.ndim != 2 or filters.shape[1] != 3 or filters.shape[0] < 1:
        raise DimensionError(f"conv_triple_rows: filters must be tau x 3, got {filters.shape}")
    return matmul(a, transpose(filters, (1, 0)))


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ArgumentError(f"gather: index out of range for {table.shape[0]} rows")

    flat = idx.reshape(-1)
    order = np.argsort(flat, kind="stable")
    uniq, starts = np.unique(flat[order], return_index=True)

    def backward(g):
        full = np.zeros_like(table.data)
        if flat.size:
            rows = g.reshape(-1, *table.shape[1:])[order]
            full[uniq] = np.add.reduceat(rows, starts, axis=0)
        return (full,)

    return _make(table.data[idx], (table,), backward, "gather")


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of ``x[B, L, E]`` over positions where ``mask[B, L]`` is set."""
    m = np.asarray(mask, dtype=x.data.dtype)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ArgumentError("masked_mean: a row has no unmasked positions")
    w = m / counts

    def backward(g):
        return (g[:, None, :] * w[:, :, None],)

    out = np.einsum("bl,ble->be", w.astype(np.float64), x.data.astype(np.float64)).astype(x.data.dtype)
    return _make(out, (x,), backward, "masked_mean")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """``x[B, C, H, W]`` convolved with ``w[O, C, k, k]`` plus bias ``b[O]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match weights {w.shape}")
    bsz, cin, _, _ = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(cols.astype(np.float64), wmat.T.astype(np.float64)).astype(x.data.dtype)
    out = (out + b.data).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)
        gw = (gm.T @ cols.astype(np.float64)).reshape(w.shape).astype(w.data.dtype)
        gb = gm.sum(axis=0).astype(b.data.dtype)
        gcols = (gm @ wmat.astype(np.float64)).reshape(bsz, ho, wo, cin, k, k)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]]
        return gx.astype(x.data.dtype), gw, gb

    return _make(out, (x, w, b), backward, "conv2d")


# ---------------------------------------------------------------------------
# scorer primitives


def norm(x: Tensor, ord: int = 2, axis: int = -1) -> Tensor:
    """L1 or L2 norm along ``axis``; the L2 subgradient at zero is zero."""
    if ord == 1:
        sign = np.sign(x.data)

        def backward(g):
            return (np.expand_dims(g, axis) * sign,)

        return _make(np.abs(x.data).sum(axis=axis), (x,), backward, "norm1")
    if ord == 2:
        n = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis))
        safe = np.where(n > 0, n, 1.0)

        def backward(g):
            return ((np.expand_dims(g / safe, axis) * x.data).astype(x.data.dtype),)

        return _make(n.astype(x.data.dtype), (x,), backward, "norm2")
    raise ArgumentError(f"unsupported norm order {ord}")


def torus_distance(x: Tensor, axis: int = -1) -> Tensor:
    """Sum over ``axis`` of the wrap-around distance of each component to 0 mod 1."""
    frac = x.data - np.floor(x.data)
    near = frac < 0.5
    dist = np.where(near, frac, 1.0 - frac)

    def backward(g):
        return (np.expand_dims(g, axis) * np.where(near, 1.0, -1.0).astype(x.data.dtype),)

    return _make(dist.sum(axis=axis).astype(x.data.dtype), (x,), backward, "torus_distance")


def circular_correlation(a: Tensor, b: Tensor) -> Tensor:
    """``out[..., k] = sum_i a[..., i] * b[..., (i + k) mod d]``.

    Evaluated in the frequency domain in float64; the naive double sum is
    kept in the tests as the reference.
    """
    _same_shape(a, b, "circular_correlation")
    d = a.shape[-1]
    fa = np.fft.rfft(a.data.astype(np.float64, copy=False), axis=-1)
    fb = np.fft.rfft(b.data.astype(np.float64, copy=False), axis=-1)
    out = np.fft.irfft(np.conj(fa) * fb, n=d, axis=-1).astype(a.data.dtype)

    def backward(g):
        fg = np.fft.rfft(g.astype(np.float64), axis=-1)
        ga = np.fft.irfft(np.conj(fg) * fb, n=d, axis=-1)  # corr(g, b)
        gb = np.fft.irfft(fg * fa, n=d, axis=-1)  # circular convolution of g and a
        return ga.astype(a.data.dtype), gb.astype(b.data.dtype)

    return _make(out, (a, b), backward, "circular_correlation")


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None):
    """Accumulate d(loss)/d(leaf) for every trainable leaf reachable from ``loss``.

    Gradients are computed into a fresh map on every call, so running
    backward twice over one graph gives identical results. Leaf ``.grad``
    fields are overwritten. With ``params`` the return value is keyed by
    parameter name and disconnected parameters get zeros; otherwise it is
    keyed by leaf tensor.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    leaves = []
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None:
                continue
            if not node._parents:
                leaves.append(node)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    for leaf in leaves:
        leaf.grad = grads[id(leaf)]
    if params is None:
        return {leaf: leaf.grad for leaf in leaves}
    out = {}
    for name, t in params.items():
        g = grads.get(id(t))
        out[name] = g if g is not None else np.zeros_like(t.data)
        t.grad = out[name]
    return out


# ---------------------------------------------------------------------------
# parameters, optimizer, randomness


class ParamStore:
    """Named trainable tensors grouped into partitions by name prefix.

    A parameter called ``"head.W"`` lives in partition ``"head"``. The store
    also carries AdamW moments and the optimizer step count.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=not frozen, name=name)
        self._params[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def partition(self, name: str) -> str:
        return name.split(".", 1)[0]

    def partitions(self) -> dict:
        out: dict[str, list] = {}
        for n in self._params:
            out.setdefault(self.partition(n), []).append(n)
        return out

    def set(self, name: str, value):
        """Replace a parameter's values (outside any live graph)."""
        t = self._params[name]
        arr = np.asarray(value)
        if arr.shape != t.shape:
            raise DimensionError(f"{name}: expected {t.shape}, got {arr.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)

    def state_dict(self) -> dict:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: dict):
        for n, arr in state.items():
            self.set(n, arr)

    def astype(self, dtype):
        """Cast every parameter in place (used by the finite-difference check)."""
        for t in self._params.values():
            t.data = t.data.astype(dtype)


def adamw_step(store: ParamStore, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.99,
               weight_decay: float = 0.01, eps: float = 1e-8) -> ParamStore:
    """One decoupled-weight-decay Adam update over every non-frozen parameter."""
    for name, g in grads.items():
        if np.shape(g) != store[name].shape:
            raise DimensionError(f"adamw_step: gradient for {name} has shape {np.shape(g)}, expected {store[name].shape}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.items():
        if name in store.frozen or name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        w = p.data.astype(np.float64)
        m = store.m.get(name, np.zeros_like(w)) * beta1 + (1.0 - beta1) * g
        v = store.v.get(name, np.zeros_like(w)) * beta2 + (1.0 - beta2) * g * g
        # moments are stored like parameters (float32) so checkpoints hold them exactly
        store.m[name], store.v[name] = m.astype(DTYPE), v.astype(DTYPE)
        w = w - lr * weight_decay * w
        w = w - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = w.astype(p.data.dtype)
    return store


class Rng:
    """Seeded generator with named, independent substreams.

    Substreams are derived from the root seed and a stable hash of the
    purpose string, so ``Rng(42).substream("init")`` is the same stream in
    every process.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def substream(self, purpose: str) -> "Rng":
        return Rng(self.seed, self._key + (zlib.crc32(purpose.encode("utf-8")),))

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def state(self):
        return self.generator.bit_generator.state

    def set_state(self, state):
        self.generator.bit_generator.state = state


def grad_check(f: Callable[[], Tensor], params: ParamStore, eps: float = 1e-3,
               names: Iterable[str] | None = None, max_per_param: int | None = None,
               rng: Rng | None = None) -> float:
    """Largest ``|g_ad - g_fd| / max(1, |g_fd|)`` over the checked components.

    ``f`` must rebuild its graph from ``params`` on every call and be
    deterministic. The check runs in float64 and restores the original
    parameter dtype and values afterwards.
    """
    if eps <= 0:
        raise ArgumentError("grad_check: eps must be positive")
    saved = params.state_dict()
    names = list(names) if names is not None else [n for n in params.names() if n not in params.frozen]
    params.astype(np.float64)
    try:
        analytic = backward(f(), params)
        worst = 0.0
        for name in names:
            p = params[name]
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = (rng or Rng(0)).generator.choice(flat.size, max_per_param, replace=False)
            ga = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f().data)
                flat[i] = orig - eps
                down = float(f().data)
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(fd)))
        return worst
    finally:
        for name, arr in saved.items():
            params[name].data = arr
