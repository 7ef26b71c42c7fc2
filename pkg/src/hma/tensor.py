"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Values are stored as row-major float32; reductions (sums, means, softmax
normalizers, normalization statistics) accumulate in float64 before casting
back. There is no implicit broadcasting: shapes must match exactly except
where an op defines its own contraction (``linear``, ``matmul_batched``) or
explicit replication (``repeat_new_axis``).

Gradients only flow while a :class:`Tape` is active; outside a tape every op
is a plain forward computation, which is how evaluation runs without touching
training state.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "mul",
    "scale",
    "relu",
    "linear",
    "matmul_batched",
    "transpose_last2",
    "softmax_lastdim",
    "layer_norm",
    "concat",
    "reshape",
    "repeat_new_axis",
    "slice_axis",
    "sum_all",
    "mean_all",
    "cross_entropy_with_logits",
]

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """A dense float32 array, optionally tracked for reverse-mode autodiff.

    ``grad`` is populated by :meth:`Tape.backward` and holds a float32 array
    of the same shape; it is ``None`` until a backward pass has touched the
    tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor values must be finite")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: _TapeOp | None = None

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
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _TapeOp:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of differentiable ops.

    Ops append in forward order, so the list is already topologically sorted
    and a single reversed sweep propagates all gradients. Use as a context
    manager around the forward pass, then call :meth:`backward`.
    """

    def __init__(self):
        self.ops: list[_TapeOp] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None

    def backward(self, loss: Tensor, params=()) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor.

        ``loss`` must be a scalar. Any tensor in ``params`` that the sweep
        never reaches ends up with an exactly-zero gradient rather than None,
        so unused parameters are distinguishable from un-backpropped ones.
        """
        if loss.data.shape != ():
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )

        pending: dict[int, np.ndarray] = {}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            if t.op is not None:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + g

        accumulate(loss, np.ones((), dtype=np.float32))
        for op in reversed(self.ops):
            out_grad = pending.pop(id(op.out), None)
            if out_grad is None:
                continue
            for tensor, grad in zip(op.inputs, op.backward_fn(out_grad)):
                if grad is not None:
                    accumulate(tensor, np.asarray(grad, dtype=np.float32))

        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def _track(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` and record the op if a tape is active and needed."""
    out = Tensor(out_data)
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        op = _TapeOp(inputs, out, backward_fn)
        out.op = op
        _ACTIVE_TAPE.ops.append(op)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op_name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _track((a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _require_same_shape(a, b, "mul")
    return _track((a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    s = float(s)
    return _track((a,), a.data * np.float32(s), lambda g: (g * np.float32(s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _track((a,), np.where(mask, a.data, np.float32(0.0)), lambda g: (g * mask,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w (+ b)`` over the last axis of ``x``.

    ``x`` may have any number of leading dimensions; ``w`` is ``[k, m]`` and
    the optional bias ``b`` is ``[m]``, added to every row.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match {w.shape}")
    lead = x.shape[:-1]
    x2d = x.data.reshape(-1, x.shape[-1])
    out = x2d @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2d = g.reshape(-1, w.shape[1])
        gx = (g2d @ w.data.T).reshape(x.shape)
        gw = x2d.T @ g2d
        gb = None
        if b is not None:
            gb = g2d.sum(axis=0, dtype=np.float64).astype(np.float32)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _track(inputs, out.reshape(*lead, w.shape[1]), backward)


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: ``[n,p,q] x [n,q,r] -> [n,p,r]``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"matmul_batched: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _track((a, b), out, backward)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ValueError(f"transpose_last2: need >= 2 dims, got {a.shape}")
    return _track(
        (a,),
        np.ascontiguousarray(a.data.swapaxes(-1, -2)),
        lambda g: (g.swapaxes(-1, -2),),
    )


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    if x.shape[-1] < 1:
        raise ValueError(f"softmax_lastdim: empty last dimension in {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_lastdim: non-finite input")
    x64 = x.data.astype(np.float64)
    x64 -= x64.max(axis=-1, keepdims=True)
    e = np.exp(x64)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)

    def backward(g):
        inner = np.sum(g.astype(np.float64) * y, axis=-1, keepdims=True)
        return ((g - inner.astype(np.float32)) * y,)

    return _track((x,), y, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: params {gain.shape}/{bias.shape} do not match last dim of {x.shape}"
        )
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = np.square(x64 - mu).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = (x64 - mu) * inv
    y = (xhat64 * gain.data + bias.data).astype(np.float32)

    def backward(g):
        dxhat = (g * gain.data).astype(np.float64)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat64).mean(axis=-1, keepdims=True)
        gx = (inv * (dxhat - m1 - xhat64 * m2)).astype(np.float32)
        ggain = np.sum(
            (g.astype(np.float64) * xhat64).reshape(-1, d), axis=0
        ).astype(np.float32)
        gbias = np.sum(g.reshape(-1, d).astype(np.float64), axis=0).astype(np.float32)
        return gx, ggain, gbias

    return _track((x, gain, bias), y, backward)


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(
            i != axis % t.ndim and t.shape[i] != base[i] for i in range(t.ndim)
        ):
            raise ValueError(f"concat: shape mismatch {base} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _track(tensors, out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    return _track((x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def repeat_new_axis(x: Tensor, count: int) -> Tensor:
    """Stack ``count`` copies of ``x`` along a new leading axis."""
    if count < 1:
        raise ValueError(f"repeat_new_axis: count must be >= 1, got {count}")
    out = np.broadcast_to(x.data, (count,) + x.shape).copy()
    return _track(
        (x,),
        out,
        lambda g: (g.sum(axis=0, dtype=np.float64).astype(np.float32),),
    )


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop)`` along ``axis``."""
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice_axis: [{start}:{stop}) out of range for {x.shape}")
    idx = tuple(
        slice(start, stop) if i == axis % x.ndim else slice(None) for i in range(x.ndim)
    )

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float32)
        gx[idx] = g
        return (gx,)

    return _track((x,), x.data[idx].copy(), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.float32(np.sum(x.data, dtype=np.float64))
    return _track((x,), out, lambda g: (np.full(x.shape, g, dtype=np.float32),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.float32(np.sum(x.data, dtype=np.float64) / n)
    return _track(
        (x,), out, lambda g: (np.full(x.shape, g / np.float32(n), dtype=np.float32),)
    )


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under unnormalized ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy_with_logits: logits {logits.shape} vs labels {labels.shape}"
        )
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("cross_entropy_with_logits: label out of range")
    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = np.float32(-logp[np.arange(n), labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((float(g) / n) * p.astype(np.float32),)

    return _track((logits,), loss, backward)
