"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, and every
operation appends one record to the active Graph (a linear tape). Backward
walks the tape in strict reverse append order, which is always a valid
reverse-topological order because an op can only consume tensors that
already exist.

Reductions that run over a point or group-member axis (softmax denominators,
attention-weighted aggregation) sum their terms in ascending value order, so
the result is bit-identical under any permutation of that axis. Plain
matmul keeps BLAS summation order and is used where the reduced axis has a
fixed meaning (feature channels).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DegenerateInput, DimensionMismatch

DTYPES = {"float64": np.float64, "float32": np.float32}

# Upper bound on scratch elements per chunk in order-canonical matmul.
_CHUNK_ELEMS = 4_000_000


class Tensor:
    """Immutable dense array node. `grad` appears only after backward."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.data.shape)}, grad={self.requires_grad}{tag})"


class Node:
    """One op record: kind, input tensors, output tensor, backward closure."""

    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_ACTIVE: list["Graph"] = []


class Graph:
    """Append-only tape of op records for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False

    def backward(self, loss: Tensor):
        """Populate .grad of every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise ContractViolation(f"backward expects a scalar loss, got shape {loss.data.shape}")
        if not self.nodes:
            raise ContractViolation("backward on an empty graph")
        grads = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            holders.pop(id(node.out), None)
            node.out.accumulate_grad(g)
            for t, gi in zip(node.inputs, node.bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = t
        for key, g in grads.items():
            holders[key].accumulate_grad(g)

    def first_nonfinite(self):
        """Index, op kind and name of the earliest non-finite op output, or None."""
        for i, node in enumerate(self.nodes):
            if not np.isfinite(node.out.data).all():
                label = node.out.name or f"{node.op}#{i}"
                return i, node.op, label
        return None


def active_graph():
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(op, inputs, out_data, bwd, name=None):
    graph = active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    if out_data.base is None:
        out_data.setflags(write=False)
    out = Tensor(out_data, requires_grad=track, name=name)
    if track:
        graph.nodes.append(Node(op, tuple(inputs), out, bwd))
    return out


def _check_same_dtype(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise DimensionMismatch(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def _sorted_axis_sum(arr, axis=-1, keepdims=False):
    """Sum along `axis` in ascending value order (permutation-canonical)."""
    # C layout first: numpy's strided reduce rounds differently.
    s = np.sort(np.ascontiguousarray(arr), axis=axis)
    return s.sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product a[m,k] @ b[k,n]."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionMismatch(
            f"matmul: incompatible shapes {tuple(a.data.shape)} x {tuple(b.data.shape)}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), out, bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading dimensions."""
    _check_same_dtype("bmm", a, b)
    if (a.data.ndim < 3 or a.data.ndim != b.data.ndim
            or a.data.shape[:-2] != b.data.shape[:-2]
            or a.data.shape[-1] != b.data.shape[-2]):
        raise DimensionMismatch(
            f"bmm: incompatible shapes {tuple(a.data.shape)} x {tuple(b.data.shape)}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _emit("bmm", (a, b), out, bwd)


def _ordered_product_data(a, b):
    # Per output element, sort the k products before summing so the result
    # does not depend on the order of the contracted axis. The scratch
    # buffer is forced to C order: numpy's strided reduce loops round
    # differently from the contiguous one, which would break bit equality.
    m, k = a.shape[-2], a.shape[-1]
    c = b.shape[-1]
    batch = a.shape[:-2]
    bt = np.ascontiguousarray(np.swapaxes(b, -1, -2))  # (..., c, k)
    out = np.empty(batch + (m, c), dtype=a.dtype)
    rows = max(1, _CHUNK_ELEMS // max(1, k * c))
    for start in range(0, m, rows):
        stop = min(m, start + rows)
        scratch = np.empty(batch + (stop - start, c, k), dtype=a.dtype)
        np.multiply(a[..., start:stop, None, :], bt[..., None, :, :], out=scratch)
        scratch.sort(axis=-1)
        out[..., start:stop, :] = scratch.sum(axis=-1)
    return out


def matmul_sorted(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product whose inner summation runs in ascending value order.

    Same contract as matmul/bmm but bit-invariant under permutation of the
    contracted axis; used for attention aggregation and channel energies.
    """
    _check_same_dtype("matmul_sorted", a, b)
    if (a.data.ndim != b.data.ndim or a.data.ndim < 2
            or a.data.shape[:-2] != b.data.shape[:-2]
            or a.data.shape[-1] != b.data.shape[-2]):
        raise DimensionMismatch(
            f"matmul_sorted: incompatible shapes {tuple(a.data.shape)} x {tuple(b.data.shape)}")
    out = _ordered_product_data(a.data, b.data)

    def bwd(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _emit("matmul_sorted", (a, b), out, bwd)


def matmul_rowstable(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product where out[..., i, j] is a pure function of row i of a
    and column j of b, independent of their positions.

    BLAS kernels may round an element differently depending on where its row
    sits in the matrix; einsum's fixed per-element accumulation does not.
    Used for projections feeding permutation-covariant blocks. Accepts 2-D x
    2-D, batched x batched, and batched x 2-D (shared weights).
    """
    _check_same_dtype("matmul_rowstable", a, b)
    ok = (a.data.ndim >= 2 and b.data.ndim in (2, a.data.ndim)
          and a.data.shape[-1] == b.data.shape[-2]
          and (b.data.ndim == 2 or a.data.shape[:-2] == b.data.shape[:-2]))
    if not ok:
        raise DimensionMismatch(
            f"matmul_rowstable: incompatible shapes {tuple(a.data.shape)} x {tuple(b.data.shape)}")
    if a.data.ndim == 2:
        spec = "ik,kj->ij"
    elif b.data.ndim == 2:
        spec = "...ik,kj->...ij"
    else:
        spec = "...ik,...kj->...ij"
    out = np.einsum(spec, a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2 and a.data.ndim > 2:
            gb = np.matmul(a.data.reshape(-1, a.data.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit("matmul_rowstable", (a, b), out, bwd)


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    if t.data.ndim < 2:
        raise DimensionMismatch(f"transpose needs rank >= 2, got shape {tuple(t.data.shape)}")
    out = np.swapaxes(t.data, -1, -2).copy()

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit("transpose", (t,), out, bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a rank-1 bias over the last axis of x."""
    _check_same_dtype("add_bias", x, b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimensionMismatch(
            f"add_bias: incompatible shapes {tuple(x.data.shape)} + {tuple(b.data.shape)}")
    out = x.data + b.data

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        return g, g.sum(axis=axes)

    return _emit("add_bias", (x, b), out, bwd)


def fc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer x @ w + b; x may carry extra leading axes."""
    if x.data.ndim > 2:
        lead = x.data.shape[:-1]
        flat = reshape(x, (int(np.prod(lead)), x.data.shape[-1]))
        return reshape(add_bias(matmul(flat, w), b), lead + (w.data.shape[-1],))
    return add_bias(matmul(x, w), b)


def fc_rowstable(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """fc whose per-row output bits do not depend on row position."""
    return add_bias(matmul_rowstable(x, w), b)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    if a.data.shape != b.data.shape:
        raise DimensionMismatch(f"add: shapes differ {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("elementwise_mul", a, b)
    if a.data.shape != b.data.shape:
        raise DimensionMismatch(
            f"elementwise_mul: shapes differ {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    out = a.data * b.data

    def bwd(g):
        return g * b.data, g * a.data

    return _emit("elementwise_mul", (a, b), out, bwd)


def scale(t: Tensor, factor: float) -> Tensor:
    f = t.data.dtype.type(factor)
    return _emit("scale", (t,), t.data * f, lambda g: (g * f,))


def sigmoid(t: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (t,), out, bwd)


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0.0)

    def bwd(g):
        return (g * (t.data > 0),)

    return _emit("relu", (t,), out, bwd)


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(t.data > 0, t.data, t.data * t.data.dtype.type(slope))

    def bwd(g):
        return (g * np.where(t.data > 0, 1.0, slope).astype(t.data.dtype),)

    return _emit("leaky_relu", (t,), out, bwd)


# ---------------------------------------------------------------------------
# softmax family (last axis, max-subtracted, order-canonical denominator)


def softmax_rows(t: Tensor) -> Tensor:
    if t.data.ndim < 1 or t.data.shape[-1] < 1:
        raise DegenerateInput("softmax_rows: empty reduction axis")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / _sorted_axis_sum(e, axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax_rows", (t,), out, bwd)


def log_softmax_rows(t: Tensor) -> Tensor:
    if t.data.ndim < 1 or t.data.shape[-1] < 1:
        raise DegenerateInput("log_softmax_rows: empty reduction axis")
    m = t.data.max(axis=-1, keepdims=True)
    e = np.exp(t.data - m)
    denom = _sorted_axis_sum(e, axis=-1, keepdims=True)
    out = t.data - m - np.log(denom)
    soft = e / denom

    def bwd(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_rows", (t,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(t: Tensor) -> Tensor:
    out = np.asarray(t.data.sum(), dtype=t.data.dtype)

    def bwd(g):
        return (np.broadcast_to(g, t.data.shape).copy(),)

    return _emit("sum", (t,), out, bwd)


def reduce_mean(t: Tensor) -> Tensor:
    if t.data.size == 0:
        raise DegenerateInput("mean of an empty tensor")
    n = t.data.size
    out = np.asarray(t.data.mean(), dtype=t.data.dtype)

    def bwd(g):
        return (np.broadcast_to(g / n, t.data.shape).copy(),)

    return _emit("mean", (t,), out, bwd)


def max_over_rows(t: Tensor) -> Tensor:
    """Max over axis -2 (group members / rows); argmax ties go to the lowest index."""
    if t.data.ndim < 2:
        raise DegenerateInput(f"max_over_rows needs rank >= 2, got shape {tuple(t.data.shape)}")
    idx = np.argmax(t.data, axis=-2)
    out = np.take_along_axis(t.data, idx[..., None, :], axis=-2).squeeze(-2)
    # +0.0 canonicalizes -0.0 so a row reorder cannot flip the zero's sign bit
    out = out + 0.0

    def bwd(g):
        gx = np.zeros_like(t.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _emit("max_over_rows", (t,), out, bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = t.data.reshape(shape)

    def bwd(g):
        return (g.reshape(t.data.shape),)

    return _emit("reshape", (t,), out, bwd)


def concat_cols(parts) -> Tensor:
    """Concatenate along the last axis; leading shapes must match exactly."""
    parts = list(parts)
    if not parts:
        raise DegenerateInput("concat_cols of no tensors")
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        _check_same_dtype("concat_cols", parts[0], p)
        if p.data.shape[:-1] != lead:
            raise DimensionMismatch(
                f"concat_cols: leading shapes differ {lead} vs {p.data.shape[:-1]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", tuple(parts), out, bwd)


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= t.data.shape[-1]):
        raise DimensionMismatch(
            f"slice_cols: [{start}:{stop}] out of range for width {t.data.shape[-1]}")
    out = t.data[..., start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(t.data)
        gx[..., start:stop] = g
        return (gx,)

    return _emit("slice_cols", (t,), out, bwd)


def split_cols(t: Tensor, widths):
    """Inverse of concat_cols; returns one tensor per width."""
    if sum(widths) != t.data.shape[-1]:
        raise DimensionMismatch(
            f"split_cols: widths {list(widths)} do not sum to {t.data.shape[-1]}")
    pieces = []
    start = 0
    for w in widths:
        pieces.append(slice_cols(t, start, start + w))
        start += w
    return pieces


# ---------------------------------------------------------------------------
# gathers (index arrays are constants; gradients flow to the table only)


def gather_rows(t: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    if t.data.ndim != 2:
        raise DimensionMismatch(f"gather_rows needs a 2-D table, got {tuple(t.data.shape)}")
    out = t.data[idx]

    def bwd(g):
        gx = np.zeros_like(t.data)
        np.add.at(gx, idx.ravel(), g.reshape(-1, t.data.shape[-1]))
        return (gx,)

    return _emit("gather_rows", (t,), out, bwd)


def weighted_gather_rows(t: Tensor, idx, w) -> Tensor:
    """out[i] = sum_m w[i,m] * t[idx[i,m]]; used for feature interpolation."""
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(w, dtype=t.data.dtype)
    if t.data.ndim != 2 or idx.shape != w.shape or idx.ndim != 2:
        raise DimensionMismatch(
            f"weighted_gather_rows: table {tuple(t.data.shape)}, idx {idx.shape}, w {w.shape}")
    out = np.einsum("im,imc->ic", w, t.data[idx])

    def bwd(g):
        gx = np.zeros_like(t.data)
        for m in range(idx.shape[1]):
            np.add.at(gx, idx[:, m], w[:, m, None] * g)
        return (gx,)

    return _emit("weighted_gather_rows", (t,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(loss_fn, params, h=1e-5):
    """Compare analytic gradients of loss_fn(params) with central differences.

    Error is |analytic - numeric| / max(1, |analytic|, |numeric|), i.e.
    relative for large gradients and absolute near zero. Returns
    (max_error, per_param dict).
    """
    with Graph() as graph:
        loss = loss_fn(params)
        graph.backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise ContractViolation(f"parameter {name!r} received no gradient")
        analytic[name] = p.grad.copy()

    per_param = {}
    worst = 0.0
    for name, p in params.items():
        base = p.data
        numeric = np.zeros(base.size)
        probe = dict(params)
        for i in range(base.size):
            bumped = base.copy()
            bumped.flat[i] += h
            probe[name] = Tensor(bumped)
            hi = loss_fn(probe).item()
            bumped = base.copy()
            bumped.flat[i] -= h
            probe[name] = Tensor(bumped)
            lo = loss_fn(probe).item()
            numeric[i] = (hi - lo) / (2.0 * h)
        a = analytic[name].ravel()
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        err = float((np.abs(a - numeric) / denom).max())
        per_param[name] = err
        worst = max(worst, err)
    return worst, per_param
