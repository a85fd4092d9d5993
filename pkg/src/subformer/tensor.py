"""Dense float64 tensors with tape-based reverse-mode autodiff.

Design constraints that keep the backward rules small:
  * broadcasting is limited to scalars and trailing axes (a [2,3] array may
    combine with a [3] array or a scalar, nothing else);
  * matmul is strictly 2-D;
  * every op is recorded on the innermost active tape, and backward walks
    that tape in exact reverse recording order.

Gradients accumulate additively into leaf tensors, so calling backward
twice without zeroing doubles them.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, VocabError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715
_F64 = np.dtype(np.float64)


class Tensor:
    """A dense float64 array plus an additive gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_is_op_output")

    def __init__(self, data, requires_grad=False):
        if type(data) is np.ndarray and data.dtype == _F64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_F64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._is_op_output = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        backward(self)

    # Operator sugar; scalars are accepted where the ops allow them.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; the context manager makes it current."""

    def __init__(self):
        self.ops = []  # entries: (inputs tuple, output Tensor, backward rule)

    def record(self, inputs, output, rule):
        self.ops.append((inputs, output, rule))
        output._tape = self
        output._is_op_output = True

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


class no_grad:
    """Disable recording inside the block; outputs do not require grad."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


# A default tape is always active so small scripts and tests can run ops and
# call backward without ceremony. Long-running code (the training loop) wraps
# each step in its own Tape so the record is dropped after the update.
_TAPE_STACK = [Tape()]


def _current_tape():
    return _TAPE_STACK[-1]


def _record(inputs, output, rule):
    tape = _current_tape()
    if tape is None:
        return output
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(tuple(t for t in inputs if isinstance(t, Tensor)), output, rule)
    return output


def backward(loss):
    """Populate .grad on every requires_grad leaf that feeds `loss`.

    Repeated calls accumulate. A scalar with no recorded history is a
    constant: there is nothing to populate and the call is a no-op.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return
    flows = {id(loss): np.ones_like(loss.data)}
    for inputs, output, rule in reversed(tape.ops):
        g = flows.pop(id(output), None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._is_op_output:
                key = id(t)
                if key in flows:
                    flows[key] = flows[key] + gi
                else:
                    flows[key] = gi
            else:
                t.accumulate_grad(gi)


def _reduce_broadcast(g, shape):
    """Sum gradient g down to `shape` (scalar or trailing-axis broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _broadcast_ok(sa, sb):
    if sa == sb:
        return True
    if sa == () or sb == ():
        return True
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(a.data + b.data)
    a_shape, b_shape = a.shape, b.shape

    def rule(g):
        return _reduce_broadcast(g, a_shape), _reduce_broadcast(g, b_shape)

    return _record((a, b), out, rule)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def rule(g):
        return _reduce_broadcast(g * bd, ad.shape), _reduce_broadcast(g * ad, bd.shape)

    return _record((a, b), out, rule)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    out = Tensor(a.data * s)
    return _record((a,), out, lambda g: (g * s,))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _record((a, b), out, rule)


def linear(x, w, b):
    """x @ w + b in one recorded op (b broadcasts over rows)."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise DimensionError(f"linear: cannot apply {wd.shape} weight to {xd.shape} input")
    out = Tensor(xd @ wd + b.data)

    def rule(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record((x, w, b), out, rule)


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T)
    return _record((a,), out, lambda g: (g.T,))


def slice_cols(a, lo, hi):
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data[:, lo:hi])
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[:, lo:hi] = g
        return (full,)

    return _record((a,), out, rule)


def concat_cols(tensors):
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))

    def rule(g):
        grads, ofs = [], 0
        for w in widths:
            grads.append(g[:, ofs:ofs + w])
            ofs += w
        return tuple(grads)

    return _record(tuple(tensors), out, rule)


def concat_rows(tensors):
    heights = [t.shape[0] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))

    def rule(g):
        grads, ofs = [], 0
        for hgt in heights:
            grads.append(g[ofs:ofs + hgt])
            ofs += hgt
        return tuple(grads)

    return _record(tuple(tensors), out, rule)


def tsum(a):
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(a.data.sum())
    shape = a.shape
    return _record((a,), out, lambda g: (np.broadcast_to(g, shape).copy() if shape else g,))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (y * g).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record((x,), out, rule)


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))
    xd = x.data
    return _record((x,), out, lambda g: (g * (xd > 0.0),))


def gelu(x):
    """Tanh-approximation GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_SQRT_2_OVER_PI * (xd + _GELU_C * x2 * xd))
    out = Tensor(0.5 * xd * (1.0 + t))

    def rule(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * dx,)

    return _record((x,), out, rule)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize the last axis, then apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    inv_d = 1.0 / d
    mu = x.data.sum(axis=-1, keepdims=True) * inv_d
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)
    gd = gamma.data

    def rule(g):
        # reduce over every axis but the last for the affine params
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        gy = g * gd
        dx = inv * (gy - gy.sum(axis=-1, keepdims=True) * inv_d
                    - xhat * ((gy * xhat).sum(axis=-1, keepdims=True) * inv_d))
        return dx, dgamma, dbeta

    return _record((x, gamma, beta), out, rule)


def attention_core(q, k, v, n_heads, bias=None):
    """Scaled dot-product attention over already-projected q/k/v.

    One recorded op covering the per-head split, score scaling, additive
    mask bias, softmax and value mixing; heads come back concatenated.
    Equivalent to the composition of slice/matmul/softmax ops, fused to
    keep the tape short.
    """
    n_q, d = q.shape
    if d % n_heads != 0:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    if k.shape != v.shape or k.shape[1] != d:
        raise DimensionError(f"attention: k {k.shape} and v {v.shape} must be [n_k, {d}]")
    hd = d // n_heads
    inv = 1.0 / math.sqrt(hd)
    qd, kd, vd = q.data, k.data, v.data

    ctx = np.empty((n_q, d))
    probs = []
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = (qd[:, sl] @ kd[:, sl].T) * inv
        if bias is not None:
            scores = scores + bias
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=1, keepdims=True)
        probs.append(p)
        ctx[:, sl] = p @ vd[:, sl]
    out = Tensor(ctx)

    def rule(g):
        dq = np.empty_like(qd)
        dk = np.empty_like(kd)
        dv = np.empty_like(vd)
        for h in range(n_heads):
            sl = slice(h * hd, (h + 1) * hd)
            p = probs[h]
            gh = g[:, sl]
            dv[:, sl] = p.T @ gh
            dp = gh @ vd[:, sl].T
            ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
            dq[:, sl] = (ds @ kd[:, sl]) * inv
            dk[:, sl] = (ds.T @ qd[:, sl]) * inv
        return dq, dk, dv

    return _record((q, k, v), out, rule), probs


# ---------------------------------------------------------------------------
# embedding and loss
# ---------------------------------------------------------------------------

def embedding_lookup(E, ids):
    """Gather rows of E; the backward pass scatter-adds into E.grad."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding_lookup expects a flat id list, got shape {ids.shape}")
    V = E.shape[0]
    bad = (ids < 0) | (ids >= V)
    if bad.any():
        raise VocabError(f"token id {int(ids[bad][0])} outside vocabulary of size {V}")
    out = Tensor(E.data[ids])
    shape = E.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _record((E,), out, rule)


def cross_entropy(logits, targets, label_smoothing=0.0, pad_id=None):
    """Mean smoothed negative log-likelihood over non-pad positions.

    The target class carries weight 1-eps and every other class eps/(V-1).
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    eps = float(label_smoothing)
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"label smoothing must be in [0, 1), got {eps}")
    targets = np.asarray(targets, dtype=np.int64)
    n, V = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but {targets.shape} targets")
    bad = (targets < 0) | (targets >= V)
    if bad.any():
        raise VocabError(f"target id {int(targets[bad][0])} outside vocabulary of size {V}")

    keep = np.ones(n, dtype=bool) if pad_id is None else targets != pad_id
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise DegenerateBatchError("all positions in the batch are padding")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    tgt_logp = logp[rows, targets]
    if eps == 0.0:
        per_pos = -tgt_logp
    else:
        off = eps / (V - 1)
        per_pos = -(1.0 - eps) * tgt_logp - off * (logp.sum(axis=1) - tgt_logp)
    out = Tensor(per_pos[keep].mean())

    def rule(g):
        y = np.full((n, V), eps / (V - 1) if eps else 0.0)
        y[rows, targets] = 1.0 - eps
        d = (np.exp(logp) - y) * (keep[:, None] / n_keep)
        return (d * g,)

    return _record((logits,), out, rule)


# ---------------------------------------------------------------------------
# rng and gradient oracle
# ---------------------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream; equal seeds give equal draw sequences."""

    def __init__(self, seed, *stream):
        self.seed = int(seed)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed,) + tuple(int(s) for s in stream)))
        )

    @classmethod
    def for_stream(cls, seed, *stream):
        return cls(seed, *stream)

    def u64(self, n):
        return self._gen.integers(0, 2 ** 64, size=n, dtype=np.uint64)

    def normal(self, shape, std=1.0):
        return self._gen.normal(0.0, std, size=shape)

    def trunc_normal(self, shape, std):
        """normal(0, std) resampled until all draws lie within 2 std."""
        x = self._gen.normal(0.0, std, size=shape)
        bound = 2.0 * std
        mask = np.abs(x) > bound
        while mask.any():
            x[mask] = self._gen.normal(0.0, std, size=int(mask.sum()))
            mask = np.abs(x) > bound
        return x

    def integers(self, lo, hi, shape=None):
        return self._gen.integers(lo, hi, size=shape)

    def uniform(self, shape=None):
        return self._gen.random(size=shape)


def grad_check(fn, inputs, h=1e-6, zero_tol=0.0):
    """Max relative error between tape gradients and central differences.

    `fn` must return a scalar Tensor when called with no arguments; the
    tensors in `inputs` are the leaves whose gradients are compared. The
    finite-difference side never touches the tape, so it stays independent
    of the backward rules it is checking.

    Central differences on a loss of magnitude f carry roundoff noise of
    about |f|*eps/h, so a coordinate whose true gradient sits below that
    floor cannot be measured (softmax makes attention key biases exactly
    such a case: their gradient is identically zero). When both sides fall
    below `zero_tol` the coordinate counts as agreeing; with the default
    0.0 the raw formula applies everywhere.
    """
    for t in inputs:
        t.zero_grad()
    with Tape():
        loss = fn()
        backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(fn().data)
                flat[i] = orig - h
                f_minus = float(fn().data)
                flat[i] = orig
                num = (f_plus - f_minus) / (2.0 * h)
                if abs(aflat[i]) < zero_tol and abs(num) < zero_tol:
                    continue
                denom = max(abs(aflat[i]), abs(num), 1e-8)
                worst = max(worst, abs(aflat[i] - num) / denom)
    return worst
