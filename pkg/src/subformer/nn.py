"""Transformer building blocks: masks, positional encodings, attention,
feed-forward modules and pre-norm encoder/decoder layers.

Everything here is width-parametric so the same code runs at the model
width, the sandwich width and the narrow embedding width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

@dataclass
class Mask:
    """Boolean attention mask; True means position (i, j) may attend."""

    allowed: np.ndarray
    kind: str = "none"

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {self.allowed.shape}")
        self._bias = None

    @property
    def shape(self):
        return self.allowed.shape

    def combine(self, other):
        if other is None:
            return self
        if self.allowed.shape != other.allowed.shape:
            raise DimensionError(
                f"cannot combine masks of shapes {self.allowed.shape} and {other.allowed.shape}"
            )
        return Mask(self.allowed & other.allowed, kind="combined")

    def bias(self):
        """Additive logits bias: 0 where allowed, -inf where blocked."""
        if self._bias is None:
            self._bias = np.where(self.allowed, 0.0, -np.inf)
        return self._bias


_CAUSAL_CACHE = {}


def causal_mask(n):
    if n < 1:
        raise ConfigError(f"causal mask needs n >= 1, got {n}")
    mask = _CAUSAL_CACHE.get(n)
    if mask is None:
        mask = Mask(np.tril(np.ones((n, n), dtype=bool)), kind="causal")
        mask.allowed.setflags(write=False)
        _CAUSAL_CACHE[n] = mask
    return mask


def padding_mask(key_is_real, n_queries):
    """Each query may attend every real (non-pad) key."""
    key_is_real = np.asarray(key_is_real, dtype=bool)
    return Mask(np.broadcast_to(key_is_real, (n_queries, key_is_real.size)).copy(),
                kind="padding")


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def sinusoidal_pe(max_len, d):
    """Interleaved sin/cos table with the 10000-base frequency schedule."""
    if d % 2 != 0:
        raise ConfigError(f"sinusoidal encodings need an even width, got {d}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    inv_freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos * inv_freq
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------

@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, d):
        return cls(Tensor(np.ones(d), requires_grad=True),
                   Tensor(np.zeros(d), requires_grad=True))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)

    def named(self):
        return [("g", self.gamma), ("b", self.beta)]


@dataclass
class AttentionParams:
    """Four square projections at width d, split into n_heads."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    n_heads: int
    d: int = field(init=False)

    def __post_init__(self):
        self.d = self.w_q.shape[0]
        if self.d % self.n_heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self):
        return self.d // self.n_heads

    @classmethod
    def create(cls, d, n_heads, rng, std=0.02):
        def w():
            return Tensor(rng.trunc_normal((d, d), std), requires_grad=True)

        def b():
            return Tensor(np.zeros(d), requires_grad=True)

        return cls(w(), b(), w(), b(), w(), b(), w(), b(), n_heads=n_heads)

    def named(self):
        return [("wq", self.w_q), ("bq", self.b_q), ("wk", self.w_k), ("bk", self.b_k),
                ("wv", self.w_v), ("bv", self.b_v), ("wo", self.w_o), ("bo", self.b_o)]


@dataclass
class FeedForwardParams:
    """Two-layer MLP d_in -> d_hidden -> d_out with an activation between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "gelu"

    @classmethod
    def create(cls, d_in, d_hidden, d_out, rng, std=0.02, activation="gelu"):
        return cls(
            Tensor(rng.trunc_normal((d_in, d_hidden), std), requires_grad=True),
            Tensor(np.zeros(d_hidden), requires_grad=True),
            Tensor(rng.trunc_normal((d_hidden, d_out), std), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True),
            activation=activation,
        )

    def __call__(self, x):
        h = T.linear(x, self.w1, self.b1)
        h = T.gelu(h) if self.activation == "gelu" else T.relu(h)
        return T.linear(h, self.w2, self.b2)

    def named(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _linear(x, w, b):
    return T.linear(x, w, b)


def multi_head_attention(q, k, v, params, mask=None, return_weights=False):
    """Scaled dot-product attention over projected inputs.

    q: [n_q, d], k/v: [n_k, d]; masked score entries get -inf before the
    softmax; per-head contexts are concatenated and output-projected.
    """
    d = params.d
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ConfigError(
            f"attention width mismatch: inputs {q.shape[-1]}/{k.shape[-1]}/{v.shape[-1]}, params {d}"
        )
    n_q, n_k = q.shape[0], k.shape[0]
    if mask is not None and mask.shape != (n_q, n_k):
        raise ConfigError(f"mask shape {mask.shape} does not match ({n_q}, {n_k})")

    qp = _linear(q, params.w_q, params.b_q)
    kp = _linear(k, params.w_k, params.b_k)
    vp = _linear(v, params.w_v, params.b_v)

    ctx, weights = T.attention_core(qp, kp, vp, params.n_heads,
                                    None if mask is None else mask.bias())
    out = _linear(ctx, params.w_o, params.b_o)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# transformer layers (pre-norm residual)
# ---------------------------------------------------------------------------

@dataclass
class TransformerLayer:
    self_attn: AttentionParams
    norm1: LayerNormParams
    ffn: FeedForwardParams
    norm2: LayerNormParams
    cross_attn: AttentionParams | None = None
    norm3: LayerNormParams | None = None

    @property
    def d(self):
        return self.self_attn.d

    @property
    def has_cross(self):
        return self.cross_attn is not None

    @classmethod
    def create(cls, d, d_ff, n_heads, rng, cross=False, std=0.02):
        return cls(
            self_attn=AttentionParams.create(d, n_heads, rng, std),
            norm1=LayerNormParams.create(d),
            ffn=FeedForwardParams.create(d, d_ff, d, rng, std),
            norm2=LayerNormParams.create(d),
            cross_attn=AttentionParams.create(d, n_heads, rng, std) if cross else None,
            norm3=LayerNormParams.create(d) if cross else None,
        )


def encoder_layer_forward(x, layer, pad_mask=None, dropout=None):
    """x + attn(LN(x)), then + ffn(LN(.)); masks only gate attention."""
    if x.shape[-1] != layer.d:
        raise ConfigError(f"input width {x.shape[-1]} != layer width {layer.d}")
    h = layer.norm1(x)
    a = multi_head_attention(h, h, h, layer.self_attn, pad_mask)
    x = T.add(x, a if dropout is None else dropout(a))
    f = layer.ffn(layer.norm2(x))
    return T.add(x, f if dropout is None else dropout(f))


def decoder_layer_forward(x, memory, layer, self_mask=None, mem_mask=None, dropout=None):
    """Causal self-attention, cross-attention over memory, feed-forward."""
    if not layer.has_cross:
        raise ContractError("decoder_layer_forward requires a layer with cross-attention")
    if memory is None:
        raise ContractError("decoder layer needs encoder memory")
    if memory.shape[-1] != layer.d:
        raise ConfigError(f"memory width {memory.shape[-1]} != layer width {layer.d}")
    h = layer.norm1(x)
    a = multi_head_attention(h, h, h, layer.self_attn, self_mask)
    x = T.add(x, a if dropout is None else dropout(a))
    h = layer.norm3(x)
    c = multi_head_attention(h, memory, memory, layer.cross_attn, mem_mask)
    x = T.add(x, c if dropout is None else dropout(c))
    f = layer.ffn(layer.norm2(x))
    return T.add(x, f if dropout is None else dropout(f))


def lm_layer_forward(x, layer, self_mask=None, dropout=None):
    """Decoder layer without cross-attention (decoder-only stacks)."""
    h = layer.norm1(x)
    a = multi_head_attention(h, h, h, layer.self_attn, self_mask)
    x = T.add(x, a if dropout is None else dropout(a))
    f = layer.ffn(layer.norm2(x))
    return T.add(x, f if dropout is None else dropout(f))


def make_dropout(p, rng):
    """Seeded inverted dropout; None when p == 0 so the tape stays clean."""
    if p <= 0.0:
        return None
    keep = 1.0 - p

    def apply(x):
        mask = (rng.uniform(x.shape) < keep) / keep
        return T.mul(x, Tensor(mask))

    return apply
