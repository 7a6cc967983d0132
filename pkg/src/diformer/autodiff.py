"""Dense tensors with reverse-mode automatic differentiation and Adam.

Small eager tape machine on top of numpy. Ops compute forward values
immediately and, when a tape is active and an input requires gradients,
append a backward closure to the tape; ``backward`` replays the tape in
reverse, accumulating into ``.grad`` buffers.

Training math is float32. All ops also accept float64 tensors so
finite-difference gradient checks can run in a 64-bit shadow through the
identical code path.

Reductions over attention key axes (softmax denominator, weighted value
sum) use center-paired summation: pairing term j with term n-1-j before
the final sum makes the result bit-identical when the key axis is
reversed, which the decoder's mirror-symmetry diagnostics require.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        # Leaves get eager zero buffers so an unused parameter reads as
        # all-zero gradient after backward; op outputs allocate lazily.
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops for one backward traversal.

    Ops append themselves in execution order, so the list is already
    topologically sorted; backward walks it once, in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, callable]] = []

    def __enter__(self) -> "Tape":
        _push(self)
        return self

    def __exit__(self, *exc):
        _pop()
        return False


_TAPE_STACK: list[Tape] = []


def _push(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop() -> None:
    _TAPE_STACK.pop()


def _active() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], bw) -> Tensor:
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, bw))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # Copy rather than alias: g may be a view into another grad buffer.
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad[...] = 1.0
    for out, bw in reversed(tape.nodes):
        if out.grad is not None:
            bw(out.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def pairsum(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Sum over the last axis, bit-identical under reversal of that axis.

    Pairs element j with element n-1-j before reducing; float addition is
    commutative, so reversing the axis swaps the operands inside each pair
    and leaves every partial sum bitwise unchanged.
    """
    n = x.shape[-1]
    h = n // 2
    if h == 0:
        s = x[..., 0].copy() if n else np.zeros(x.shape[:-1], x.dtype)
    else:
        s = np.sum(x[..., :h] + x[..., n - h :][..., ::-1], axis=-1)
        if n % 2:
            s = s + x[..., h]
    return s[..., None] if keepdims else s


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))

    def bw(g):
        _accum(a, g * a.data.dtype.type(c))

    return _record(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports (...,m,k)@(k,n) and same-batch (...,m,k)@(...,k,n)."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _record(out, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _record(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data).reshape(shape))

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _record(out, (a,), bw)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a [V, d] table by an integer index array."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _record(out, (table,), bw)


def ssum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _record(out, (a,), bw)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with True mask entries forced to exactly 0.

    Masked logits are replaced by -inf before exponentiation, so masked
    positions contribute bitwise zero downstream. Raises if any row is
    fully masked.
    """
    mask_b = np.broadcast_to(mask, logits.data.shape)
    neg = logits.data.dtype.type(-np.inf)
    x = np.where(mask_b, neg, logits.data)
    m = np.max(x, axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("empty context: softmax row has every key masked")
    e = np.exp(x - m)
    denom = pairsum(e, keepdims=True)
    out = Tensor(e / denom)
    alpha = out.data

    def bw(g):
        inner = np.sum(g * alpha, axis=-1, keepdims=True)
        _accum(logits, alpha * (g - inner))

    return _record(out, (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if d <= 0:
        raise ValueError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        if gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            _accum(bias, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            h = g * gain.data
            hm = h.mean(axis=-1, keepdims=True)
            hxm = (h * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (h - hm - xhat * hxm) * inv)

    return _record(out, (x, gain, bias), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore: int = -1) -> Tensor:
    """Mean negative log-softmax of the target ids over non-ignored rows."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ValueError(f"cross_entropy expects [n, V] logits and [n] targets, got {logits.data.shape} / {targets.shape}")
    keep = targets != ignore
    count = int(keep.sum())
    if count == 0:
        raise ValueError("no loss targets: every position is ignored")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=-1)) + m[:, 0]
    rows = np.arange(x.shape[0])
    safe_t = np.where(keep, targets, 0)
    nll = lse - x[rows, safe_t]
    loss = Tensor(np.asarray(nll[keep].sum() / count, dtype=x.dtype))

    def bw(g):
        if not logits.requires_grad:
            return
        soft = np.exp(z - (lse - m[:, 0])[:, None])
        soft[rows, safe_t] -= 1.0
        soft[~keep] = 0.0
        _accum(logits, soft * (g / count))

    return _record(loss, (logits,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; rate 0 is the identity."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    out = Tensor(x.data * keep)

    def bw(g):
        _accum(x, g * keep)

    return _record(out, (x,), bw)


def masked_mean(x: Tensor, keep: np.ndarray) -> Tensor:
    """Mean of x[b, n, :] over positions with keep[b, n] True -> [b, d]."""
    keep_f = keep.astype(x.data.dtype)
    counts = keep_f.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("masked_mean: a row keeps no positions")
    out = Tensor(np.einsum("bnd,bn->bd", x.data, keep_f, optimize=True) / counts[:, None])

    def bw(g):
        _accum(x, g[:, None, :] * (keep_f / counts[:, None])[:, :, None])

    return _record(out, (x,), bw)


def rel_scores(q: Tensor, table: Tensor, rel_idx: np.ndarray) -> Tensor:
    """Query-dependent relative-position score term.

    out[b,h,i,j] = sum_d q[b,h,i,d] * table[rel_idx[i,j], d]
    """
    gathered = np.ascontiguousarray(table.data[rel_idx])
    out = Tensor(np.einsum("bhid,ijd->bhij", q.data, gathered, optimize=True))

    def bw(g):
        if q.requires_grad:
            _accum(q, np.einsum("bhij,ijd->bhid", g, gathered, optimize=True))
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, rel_idx, np.einsum("bhij,bhid->ijd", g, q.data, optimize=True))

    return _record(out, (q, table), bw)


def attend(alpha: Tensor, v: Tensor, rel_table: Tensor | None = None, rel_idx: np.ndarray | None = None) -> Tensor:
    """Attention-weighted value sum, optionally with relative-position values.

    out[b,h,i,d] = sum_j alpha[b,h,i,j] * (v[b,h,j,d] + table[rel_idx[i,j], d])

    With a relative table present the key-axis reduction is center-paired
    (see pairsum), keeping the forward bit-stable under key reversal.
    """
    if rel_table is None:
        out = Tensor(np.matmul(alpha.data, v.data))

        def bw(g):
            if alpha.requires_grad:
                _accum(alpha, np.matmul(g, np.swapaxes(v.data, -1, -2)))
            if v.requires_grad:
                _accum(v, np.matmul(np.swapaxes(alpha.data, -1, -2), g))

        return _record(out, (alpha, v), bw)

    gathered = np.ascontiguousarray(rel_table.data[rel_idx])  # [Nq, Nk, dh]
    w = v.data[:, :, None, :, :] + gathered[None, None]  # [B,H,Nq,Nk,dh]
    t = alpha.data[..., None] * w
    nk = t.shape[-2]
    h = nk // 2
    if h == 0:
        o = t[..., 0, :].copy()
    else:
        o = np.sum(t[..., :h, :] + t[..., nk - h :, :][..., ::-1, :], axis=-2)
        if nk % 2:
            o = o + t[..., h, :]
    out = Tensor(o)

    def bw(g):
        if alpha.requires_grad:
            da = np.einsum("bhid,bhjd->bhij", g, v.data, optimize=True) + np.einsum("bhid,ijd->bhij", g, gathered, optimize=True)
            _accum(alpha, da)
        if v.requires_grad:
            _accum(v, np.matmul(np.swapaxes(alpha.data, -1, -2), g))
        if rel_table.requires_grad:
            if rel_table.grad is None:
                rel_table.grad = np.zeros_like(rel_table.data)
            np.add.at(rel_table.grad, rel_idx, np.einsum("bhij,bhid->ijd", alpha.data, g, optimize=True))

    return _record(out, (alpha, v, rel_table), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment buffers and step counter for a parameter dict."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in-place; gradients are zeroed afterward."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter '{name}' at step {state.step}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0
