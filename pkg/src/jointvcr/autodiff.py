"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation applied to tracked tensors. Calling
:meth:`Tape.backward` on a scalar root walks the records in reverse and returns
a map from node id to gradient array.

Tensors created without a tape (``Tensor(x)`` or :func:`constant`) are
constants: ops over constants only produce constants and record nothing.

Broadcasting is limited to scalar-with-tensor, except for :func:`affine`, which
adds a bias vector along the last axis, and :func:`matmul`, which accepts a
2-D right operand against a batched left operand.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "Tape",
    "constant",
    "detach",
    "add",
    "sub",
    "mul",
    "neg",
    "elementwise",
    "matmul",
    "affine",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "reduce",
    "sum",
    "mean",
    "concat",
    "stack",
    "reshape",
    "swap_last",
    "take",
    "take_along",
    "narrow",
    "embed",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called in violation of its preconditions."""


class Tensor:
    """Dense float64 array, optionally registered as a node on a :class:`Tape`."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: int | None = None, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


Backward = Callable[[np.ndarray], Sequence[np.ndarray]]


class Tape:
    """Ordered record of ops; node ids are indices into :attr:`nodes`.

    Each node is ``(kind, input_ids, backward_fn, shape)``. Leaves have an
    empty input tuple and no backward function. Inputs always precede their
    consumers, so reverse list order is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], Backward | None, tuple[int, ...]]] = []
        self.origin: Tape = self  # clones accept tensors recorded on the tape they copy

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        """Register ``data`` (copied) as a differentiable input."""
        arr = np.array(data, dtype=np.float64)
        self.nodes.append(("leaf", (), None, arr.shape))
        return Tensor(arr, len(self.nodes) - 1, self)

    def clone(self) -> Tape:
        other = Tape()
        other.nodes = list(self.nodes)
        other.origin = self.origin
        return other

    def record(self, kind: str, out: np.ndarray, inputs: Sequence[Tensor], fn: Backward) -> Tensor:
        ids = tuple(t.node for t in inputs)
        self.nodes.append((kind, ids, fn, out.shape))
        return Tensor(out, len(self.nodes) - 1, self)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``root`` for every node it depends on."""
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is None or root.tape.origin is not self.origin or root.node is None or root.node >= len(self.nodes):
            raise ContractError("root is not recorded on this tape")
        grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
        nodes = self.nodes
        for nid in range(root.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            _, inputs, fn, _ = nodes[nid]
            if fn is None:
                continue
            for iid, gi in zip(inputs, fn(g)):
                if iid is None:
                    continue
                prev = grads.get(iid)
                grads[iid] = gi if prev is None else prev + gi
        return grads

    def grad(self, grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
        """Gradient of ``t`` from a backward map; zeros when unreached."""
        if t.node is not None and t.node in grads:
            return grads[t.node]
        return np.zeros(t.shape)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(root)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) and x.node is None else Tensor(_data(x))


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path."""
    return Tensor(x.data)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(kind: str, out: np.ndarray, inputs: Sequence[Tensor], fn: Backward) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{kind}: operands live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    return tape.record(kind, out, inputs, fn)


# -- elementwise ------------------------------------------------------------


def _is_scalar(a: np.ndarray) -> bool:
    return a.ndim == 0 or a.size == 1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def elementwise(a, b, kind: str) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape and not (_is_scalar(ad) or _is_scalar(bd)):
        raise ShapeError(f"{kind}: incompatible shapes {ad.shape} and {bd.shape}")
    sa, sb = ad.shape, bd.shape
    if kind == "add":
        out = ad + bd

        def fn(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

    elif kind == "sub":
        out = ad - bd

        def fn(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    elif kind == "mul":
        out = ad * bd

        def fn(g):
            return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _finish(kind, out, (a, b), fn)


def add(a, b) -> Tensor:
    return elementwise(a, b, "add")


def sub(a, b) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a, b) -> Tensor:
    return elementwise(a, b, "mul")


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _finish("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _finish("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise ContractError("log of a non-positive value")
    return _finish("log", np.log(d), (x,), lambda g: (g / d,))


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` or ``[..., k, n]``
    with the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    ok = ad.ndim >= 2 and bd.ndim >= 2 and ad.shape[-1] == bd.shape[-2]
    ok = ok and (bd.ndim == 2 or bd.shape[:-2] == ad.shape[:-2])
    if not ok:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    out = ad @ bd
    shared_b = bd.ndim == 2 and ad.ndim > 2

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared_b:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _finish("matmul", out, (a, b), fn)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast along the last axis."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.shape[-1] != wd.shape[0] or wd.ndim != 2 or bd.shape != (wd.shape[1],):
        raise ShapeError(f"affine: shapes {xd.shape}, {wd.shape}, {bd.shape} do not chain")
    out = xd @ wd + bd
    k, n = wd.shape

    def fn(g):
        g2 = g.reshape(-1, n)
        return g @ wd.T, xd.reshape(-1, k).T @ g2, g2.sum(axis=0)

    return _finish("affine", out, (x, w, b), fn)


# -- normalizers and losses -------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    z = np.exp(d - d.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", s, (x,), fn)


def _log_softmax(d: np.ndarray, axis: int) -> np.ndarray:
    shifted = d - d.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ls = _log_softmax(x.data, axis)

    def fn(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", ls, (x,), fn)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under ``softmax(logits)``.

    ``logits`` is ``[b, n]`` with ``target`` of length ``b``, or ``[n]`` with a
    single integer target.
    """
    d = logits.data
    single = d.ndim == 1
    d2 = d[None, :] if single else d.reshape(-1, d.shape[-1])
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    b, n = d2.shape
    if t.shape != (b,):
        raise ShapeError(f"cross_entropy: {b} rows but {t.shape[0]} targets")
    if np.any(t < 0) or np.any(t >= n):
        bad = t[(t < 0) | (t >= n)][0]
        raise IndexError(f"cross_entropy: target {bad} out of range for {n} classes")
    ls = _log_softmax(d2, -1)
    rows = np.arange(b)
    loss = -ls[rows, t].mean()

    def fn(g):
        p = np.exp(ls)
        p[rows, t] -= 1.0
        return ((g * p / b).reshape(d.shape),)

    return _finish("cross_entropy", np.asarray(loss), (logits,), fn)


# -- reductions and reshaping -----------------------------------------------


def reduce(x: Tensor, kind: str = "sum", axis: int | None = None) -> Tensor:
    d = x.data
    if kind == "sum":
        out = d.sum(axis=axis)
        scale = 1.0
    elif kind == "mean":
        out = d.mean(axis=axis)
        scale = 1.0 / (d.size if axis is None else d.shape[axis])
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    shape = d.shape

    def fn(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape).copy(),)

    return _finish(kind, np.asarray(out), (x,), fn)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axis)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, "mean", axis)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.data.shape[axis] for x in xs])[:-1]

    def fn(g):
        return np.split(g, bounds, axis=axis)

    return _finish("concat", out, xs, fn)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def fn(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return _finish("stack", out, xs, fn)


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    src = x.data.shape
    return _finish("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(src),))


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    return _finish("swap_last", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (numpy ``take`` semantics); backward scatter-adds."""
    d = x.data
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(d, idx, axis=axis)
    ax = axis % d.ndim

    def fn(g):
        gx = np.zeros(d.shape)
        if idx.ndim == 0:
            sl = [slice(None)] * d.ndim
            sl[ax] = int(idx)
            gx[tuple(sl)] += g
        else:
            moved = np.moveaxis(gx, ax, 0)
            gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
            np.add.at(moved, idx, gm)
        return (gx,)

    return _finish("take", out, (x,), fn)


def take_along(x: Tensor, idx) -> Tensor:
    """``out[r] = x[r, idx[r]]`` over the last axis; ``idx`` has shape ``x.shape[:-1]``."""
    d = x.data
    ii = np.asarray(idx, dtype=np.int64)
    if ii.shape != d.shape[:-1]:
        raise ShapeError(f"take_along: index shape {ii.shape} vs tensor {d.shape}")
    if np.any(ii < 0) or np.any(ii >= d.shape[-1]):
        raise IndexError("take_along: index out of range")
    out = np.take_along_axis(d, ii[..., None], axis=-1)[..., 0]

    def fn(g):
        gx = np.zeros(d.shape)
        np.put_along_axis(gx, ii[..., None], g[..., None], axis=-1)
        return (gx,)

    return _finish("take_along", out, (x,), fn)


def narrow(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    d = x.data
    sl = [slice(None)] * d.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def fn(g):
        gx = np.zeros(d.shape)
        gx[sl] = g
        return (gx,)

    return _finish("narrow", d[sl], (x,), fn)


def embed(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; output shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].flat[0]
        raise IndexError(f"embed: token id {bad} outside vocabulary of size {v}")
    out = table.data[ids]

    def fn(g):
        gt = np.zeros(table.data.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _finish("embed", out, (table,), fn)


# -- gradient checking ------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3, coords=None) -> float:
    """Largest relative error between backward and central differences.

    The error for coordinate ``i`` is ``|a_i - n_i| / max(1, |a_i|)``. ``coords``
    restricts the check to a subset of flat indices.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    x0 = np.array(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x0)
    y = f(xt)
    if y.tape is tape:
        analytic = tape.grad(tape.backward(y), xt).reshape(-1)
    else:
        analytic = np.zeros(x0.size)
    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
