"""Model assembly: configuration, the parameter registry with aliasing,
factorized (SAFE) embeddings, cross-layer sharing schemes, and the
encoder-decoder / decoder-only models built from them.

Sharing is implemented by aliasing: layers in the same group hold the very
same Tensor objects, so one optimizer update keeps them identical forever.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, LengthError
from . import tensor as T
from .tensor import Tensor
from . import nn
from .nn import (AttentionParams, FeedForwardParams, LayerNormParams, Mask,
                 TransformerLayer, causal_mask, padding_mask, sinusoidal_pe)

SCHEMES = ("none", "all", "all_indep_ffn", "all_except_last", "every2", "sandwich")
EMBED_MODES = ("standard", "linear", "linear2", "safe")
ARCHS = ("seq2seq", "lm")

INIT_STD = 0.02


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    V: int
    d_e: int = 16
    d_m: int = 32
    d_s: int = 32
    dff_m: int = 64
    dff_s: int = 64
    L_enc: int = 2
    L_dec: int = 2
    n_heads: int = 2
    n_heads_safe: int = 2
    scheme: str = "none"
    embed_mode: str = "safe"
    tie_embeddings: bool = True
    max_len: int = 64
    dropout: float = 0.0
    arch: str = "seq2seq"

    def validate(self):
        if self.V < 2:
            raise ConfigError(f"vocab size must be >= 2, got {self.V}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.embed_mode not in EMBED_MODES:
            raise ConfigError(
                f"unknown embed_mode {self.embed_mode!r}; expected one of {EMBED_MODES}")
        for name in ("d_e", "d_m", "d_s", "dff_m", "dff_s"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.embed_mode == "standard" and self.d_e != self.d_m:
            raise ConfigError(
                f"embed_mode=standard requires d_e == d_m, got {self.d_e} != {self.d_m}")
        if self.scheme != "sandwich" and self.d_s != self.d_m:
            raise ConfigError(
                f"d_s ({self.d_s}) must equal d_m ({self.d_m}) unless scheme=sandwich")
        if self.d_m % self.n_heads != 0:
            raise ConfigError(f"d_m={self.d_m} not divisible by n_heads={self.n_heads}")
        if self.d_s % self.n_heads != 0:
            raise ConfigError(f"d_s={self.d_s} not divisible by n_heads={self.n_heads}")
        if self.d_e % self.n_heads_safe != 0:
            raise ConfigError(
                f"d_e={self.d_e} not divisible by n_heads_safe={self.n_heads_safe}")
        for L in self.stack_sizes():
            if L < 1:
                raise ConfigError(f"layer count must be >= 1, got {L}")
            if self.scheme == "sandwich" and L < 3:
                raise ConfigError(f"scheme=sandwich requires L >= 3, got {L}")
            if self.scheme == "every2" and L % 2 != 0:
                raise ConfigError(f"scheme=every2 requires even L, got {L}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    def stack_sizes(self):
        """Layer counts of the stacks this architecture actually has."""
        if self.arch == "lm":
            return (self.L_dec,)
        return (self.L_enc, self.L_dec)


# ---------------------------------------------------------------------------
# sharing schemes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShareMap:
    """Group id per layer; attention and norms share one map, ffn another."""

    attn: tuple
    ffn: tuple

    def n_layers(self):
        return len(self.attn)


def share_map(scheme, L):
    """Deterministic layer -> group assignment for one stack.

    all_indep_ffn keeps a single attention+norm group while the first layer
    keeps the base feed-forward and layers 2..L share one fresh one.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}")
    if L < 1:
        raise ConfigError(f"layer count must be >= 1, got {L}")
    if scheme == "none":
        ids = tuple(range(L))
        return ShareMap(ids, ids)
    if scheme == "all":
        ids = (0,) * L
        return ShareMap(ids, ids)
    if scheme == "all_indep_ffn":
        return ShareMap((0,) * L, (0,) + (1,) * (L - 1))
    if scheme == "all_except_last":
        ids = (0,) * (L - 1) + (1,)
        return ShareMap(ids, ids)
    if scheme == "every2":
        if L % 2 != 0:
            raise ConfigError(f"scheme=every2 requires even L, got {L}")
        ids = tuple(i // 2 for i in range(L))
        return ShareMap(ids, ids)
    # sandwich: first and last independent, everything between shared
    if L < 3:
        raise ConfigError(f"scheme=sandwich requires L >= 3, got {L}")
    ids = (0,) + (1,) * (L - 2) + (2,)
    return ShareMap(ids, ids)


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

class ParameterRegistry:
    """Named parameter slots; aliased slots resolve to the same Tensor."""

    def __init__(self):
        self._slots = {}     # canonical name -> Tensor
        self._aliases = {}   # alias name -> canonical name
        self._order = []     # canonical names in creation order

    def add(self, name, t):
        if name in self._slots or name in self._aliases:
            raise ContractError(f"duplicate parameter slot {name!r}")
        self._slots[name] = t
        self._order.append(name)
        return t

    def alias(self, name, canonical):
        if canonical not in self._slots:
            raise ContractError(f"alias target {canonical!r} does not exist")
        if name in self._slots or name in self._aliases:
            raise ContractError(f"duplicate parameter slot {name!r}")
        self._aliases[name] = canonical

    def resolve(self, name):
        return self._slots[self._aliases.get(name, name)]

    def canonical(self, name):
        return self._aliases.get(name, name)

    def distinct(self):
        """(canonical name, tensor) pairs in creation order."""
        return [(n, self._slots[n]) for n in self._order]

    def alias_groups(self):
        groups = {n: [] for n in self._order}
        for alias, canon in self._aliases.items():
            groups[canon].append(alias)
        return groups

    def total_scalars(self):
        return sum(t.size for _, t in self.distinct())

    def zero_grads(self):
        for _, t in self.distinct():
            t.zero_grad()


def _register(reg, prefix, bundle):
    for suffix, t in bundle.named():
        reg.add(f"{prefix}.{suffix}", t)


def _alias(reg, prefix, owner_prefix, bundle):
    for suffix, _ in bundle.named():
        reg.alias(f"{prefix}.{suffix}", f"{owner_prefix}.{suffix}")


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

@dataclass
class SafeEmbedding:
    """Token embedding at width d_e plus a projection to d_m.

    mode=standard: identity (requires d_e == d_m).
    mode=linear:   one linear d_e -> d_m.
    mode=linear2:  linear d_e -> d_e, then d_e -> d_m.
    mode=safe:     pre-norm self-attention at d_e with residual, then a
                   feed-forward d_e -> d_m with hidden width d_m.
    """

    mode: str
    E: Tensor
    pe: np.ndarray
    proj_w1: Tensor | None = None    # linear / linear2 weights
    proj_b1: Tensor | None = None
    proj_w2: Tensor | None = None
    proj_b2: Tensor | None = None
    attn: AttentionParams | None = None
    norm1: LayerNormParams | None = None
    norm2: LayerNormParams | None = None
    ffn: FeedForwardParams | None = None

    @property
    def max_len(self):
        return self.pe.shape[0]


def _build_embedding(cfg, rng, reg, prefix, E, pe):
    mode = cfg.embed_mode
    emb = SafeEmbedding(mode=mode, E=E, pe=pe)
    if mode == "linear":
        emb.proj_w1 = Tensor(rng.trunc_normal((cfg.d_e, cfg.d_m), INIT_STD), requires_grad=True)
        emb.proj_b1 = Tensor(np.zeros(cfg.d_m), requires_grad=True)
        reg.add(f"{prefix}.proj.w", emb.proj_w1)
        reg.add(f"{prefix}.proj.b", emb.proj_b1)
    elif mode == "linear2":
        emb.proj_w1 = Tensor(rng.trunc_normal((cfg.d_e, cfg.d_e), INIT_STD), requires_grad=True)
        emb.proj_b1 = Tensor(np.zeros(cfg.d_e), requires_grad=True)
        emb.proj_w2 = Tensor(rng.trunc_normal((cfg.d_e, cfg.d_m), INIT_STD), requires_grad=True)
        emb.proj_b2 = Tensor(np.zeros(cfg.d_m), requires_grad=True)
        for name, t in (("proj1.w", emb.proj_w1), ("proj1.b", emb.proj_b1),
                        ("proj2.w", emb.proj_w2), ("proj2.b", emb.proj_b2)):
            reg.add(f"{prefix}.{name}", t)
    elif mode == "safe":
        emb.attn = AttentionParams.create(cfg.d_e, cfg.n_heads_safe, rng, INIT_STD)
        emb.norm1 = LayerNormParams.create(cfg.d_e)
        emb.norm2 = LayerNormParams.create(cfg.d_e)
        emb.ffn = FeedForwardParams.create(cfg.d_e, cfg.d_m, cfg.d_m, rng, INIT_STD)
        _register(reg, f"{prefix}.attn", emb.attn)
        _register(reg, f"{prefix}.norm1", emb.norm1)
        _register(reg, f"{prefix}.norm2", emb.norm2)
        _register(reg, f"{prefix}.ffn", emb.ffn)
    return emb


def safe_forward(ids, emb, causal=False, dropout=None):
    """Embed token ids and project to model width per the embedding mode."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size
    if n > emb.max_len:
        raise LengthError(f"sequence length {n} exceeds max_len {emb.max_len}")
    x = T.embedding_lookup(emb.E, ids)
    x = T.add(x, Tensor(emb.pe[:n]))
    if dropout is not None:
        x = dropout(x)
    if emb.mode == "standard":
        return x
    if emb.mode == "linear":
        return T.linear(x, emb.proj_w1, emb.proj_b1)
    if emb.mode == "linear2":
        h = T.linear(x, emb.proj_w1, emb.proj_b1)
        return T.linear(h, emb.proj_w2, emb.proj_b2)
    # safe: contextualize at d_e, then feed-forward up to d_m
    mask = causal_mask(n) if causal else None
    xn = emb.norm1(x)
    h = nn.multi_head_attention(xn, xn, xn, emb.attn, mask)
    x = T.add(x, h if dropout is None else dropout(h))
    return emb.ffn(emb.norm2(x))


# ---------------------------------------------------------------------------
# projection pair around the sandwich
# ---------------------------------------------------------------------------

@dataclass
class ProjectionPair:
    up_norm: LayerNormParams
    up: FeedForwardParams      # d_m -> d_s, hidden d_s
    down_norm: LayerNormParams
    down: FeedForwardParams    # d_s -> d_m, hidden d_m

    @classmethod
    def create(cls, d_m, d_s, rng):
        return cls(
            up_norm=LayerNormParams.create(d_m),
            up=FeedForwardParams.create(d_m, d_s, d_s, rng, INIT_STD),
            down_norm=LayerNormParams.create(d_s),
            down=FeedForwardParams.create(d_s, d_m, d_m, rng, INIT_STD),
        )

    def project_up(self, x):
        return self.up(self.up_norm(x))

    def project_down(self, x):
        return self.down(self.down_norm(x))


# ---------------------------------------------------------------------------
# stacks and models
# ---------------------------------------------------------------------------

@dataclass
class Stack:
    layers: list                      # L entries; shared slots hold shared objects
    smap: ShareMap
    final_norm: LayerNormParams
    pair: ProjectionPair | None       # present iff sandwich and d_s != d_m
    sandwich: bool

    @property
    def L(self):
        return len(self.layers)


def _build_stack(cfg, rng, reg, prefix, L, cross):
    smap = share_map(cfg.scheme, L)
    sandwich = cfg.scheme == "sandwich"
    layers = []
    for i in range(L):
        d = cfg.d_s if sandwich and 0 < i < L - 1 else cfg.d_m
        dff = cfg.dff_s if sandwich and 0 < i < L - 1 else cfg.dff_m
        a_owner = smap.attn.index(smap.attn[i])
        f_owner = smap.ffn.index(smap.ffn[i])
        name = f"{prefix}.layer{i}"
        if a_owner == i:
            attn = AttentionParams.create(d, cfg.n_heads, rng, INIT_STD)
            norm1 = LayerNormParams.create(d)
            norm2 = LayerNormParams.create(d)
            cross_attn = AttentionParams.create(d, cfg.n_heads, rng, INIT_STD) if cross else None
            norm3 = LayerNormParams.create(d) if cross else None
            _register(reg, f"{name}.attn", attn)
            _register(reg, f"{name}.norm1", norm1)
            _register(reg, f"{name}.norm2", norm2)
            if cross:
                _register(reg, f"{name}.cross", cross_attn)
                _register(reg, f"{name}.norm3", norm3)
        else:
            owner = layers[a_owner]
            owner_name = f"{prefix}.layer{a_owner}"
            attn, norm1, norm2 = owner.self_attn, owner.norm1, owner.norm2
            cross_attn, norm3 = owner.cross_attn, owner.norm3
            _alias(reg, f"{name}.attn", f"{owner_name}.attn", attn)
            _alias(reg, f"{name}.norm1", f"{owner_name}.norm1", norm1)
            _alias(reg, f"{name}.norm2", f"{owner_name}.norm2", norm2)
            if cross:
                _alias(reg, f"{name}.cross", f"{owner_name}.cross", cross_attn)
                _alias(reg, f"{name}.norm3", f"{owner_name}.norm3", norm3)
        if f_owner == i:
            ffn = FeedForwardParams.create(d, dff, d, rng, INIT_STD)
            _register(reg, f"{name}.ffn", ffn)
        else:
            ffn = layers[f_owner].ffn
            _alias(reg, f"{name}.ffn", f"{prefix}.layer{f_owner}.ffn", ffn)
        if a_owner == f_owner and a_owner != i:
            layers.append(layers[a_owner])      # fully shared slot, one object
        else:
            layers.append(TransformerLayer(self_attn=attn, norm1=norm1, ffn=ffn,
                                           norm2=norm2, cross_attn=cross_attn,
                                           norm3=norm3))
    pair = None
    if sandwich and cfg.d_s != cfg.d_m:
        pair = ProjectionPair.create(cfg.d_m, cfg.d_s, rng)
        _register(reg, f"{prefix}.up.norm", pair.up_norm)
        _register(reg, f"{prefix}.up.ffn", pair.up)
        _register(reg, f"{prefix}.down.norm", pair.down_norm)
        _register(reg, f"{prefix}.down.ffn", pair.down)
    final = LayerNormParams.create(cfg.d_m)
    _register(reg, f"{prefix}.final_norm", final)
    return Stack(layers=layers, smap=smap, final_norm=final, pair=pair, sandwich=sandwich)


@dataclass
class Subformer:
    config: ModelConfig
    registry: ParameterRegistry
    enc_embed: SafeEmbedding
    dec_embed: SafeEmbedding
    encoder: Stack
    decoder: Stack
    head_w: Tensor
    head_b: Tensor

    def forward(self, src_ids, tgt_ids, src_real=None, tgt_real=None, dropout=None):
        return forward(src_ids, tgt_ids, self, src_real, tgt_real, dropout)


@dataclass
class SubformerLM:
    config: ModelConfig
    registry: ParameterRegistry
    embed: SafeEmbedding
    decoder: Stack
    head_w: Tensor
    head_b: Tensor

    def forward(self, ids, real=None, dropout=None):
        return lm_forward(ids, self, real, dropout)


def build(config, rng):
    """Allocate a model whose distinct tensors follow share_map exactly."""
    cfg = config.validate()
    reg = ParameterRegistry()
    pe = sinusoidal_pe(cfg.max_len, cfg.d_e)

    if cfg.arch == "lm":
        E = reg.add("embed.E", Tensor(rng.trunc_normal((cfg.V, cfg.d_e), INIT_STD),
                                      requires_grad=True))
        embed = _build_embedding(cfg, rng, reg, "embed", E, pe)
        decoder = _build_stack(cfg, rng, reg, "dec", cfg.L_dec, cross=False)
        head_w, head_b = _build_head(cfg, rng, reg)
        return SubformerLM(cfg, reg, embed, decoder, head_w, head_b)

    E = reg.add("enc_embed.E", Tensor(rng.trunc_normal((cfg.V, cfg.d_e), INIT_STD),
                                      requires_grad=True))
    enc_embed = _build_embedding(cfg, rng, reg, "enc_embed", E, pe)
    if cfg.tie_embeddings:
        reg.alias("dec_embed.E", "enc_embed.E")
        E_dec = E
    else:
        E_dec = reg.add("dec_embed.E", Tensor(rng.trunc_normal((cfg.V, cfg.d_e), INIT_STD),
                                              requires_grad=True))
    dec_embed = _build_embedding(cfg, rng, reg, "dec_embed", E_dec, pe)
    encoder = _build_stack(cfg, rng, reg, "enc", cfg.L_enc, cross=False)
    decoder = _build_stack(cfg, rng, reg, "dec", cfg.L_dec, cross=True)
    head_w, head_b = _build_head(cfg, rng, reg)
    return Subformer(cfg, reg, enc_embed, dec_embed, encoder, decoder, head_w, head_b)


def _build_head(cfg, rng, reg):
    out_dim = cfg.d_e if cfg.tie_embeddings else cfg.V
    w = reg.add("head.w", Tensor(rng.trunc_normal((cfg.d_m, out_dim), INIT_STD),
                                 requires_grad=True))
    b = reg.add("head.b", Tensor(np.zeros(out_dim), requires_grad=True))
    return w, b


def randomize_params(model, rng, std=0.3):
    """Redraw every parameter at a healthy scale for gradient checking.

    Training init (std 0.02) leaves attention-score gradients near the
    float64 finite-difference noise floor; std 0.3 (norm gains at 1 +/- 0.3)
    keeps every live gradient measurable.
    """
    for name, t in model.registry.distinct():
        t.data = rng.normal(t.data.shape, std)
        if name.endswith(".g"):
            t.data += 1.0
    return model


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def output_logits(h, model):
    """Tied: (h W_out + b) E^T; untied: h W_vocab + b."""
    proj = T.linear(h, model.head_w, model.head_b)
    if not model.config.tie_embeddings:
        return proj
    E = model.embed.E if isinstance(model, SubformerLM) else model.enc_embed.E
    return T.matmul(proj, T.transpose(E))


def _self_mask(n, real, causal):
    mask = causal_mask(n) if causal else None
    if real is not None and not bool(np.all(real)):
        pad = padding_mask(real, n)
        mask = pad if mask is None else mask.combine(pad)
    return mask


def _stack_encode(h, stack, mask, dropout):
    if stack.sandwich:
        h = nn.encoder_layer_forward(h, stack.layers[0], mask, dropout)
        if stack.pair is not None:
            h = stack.pair.project_up(h)
        for layer in stack.layers[1:-1]:
            h = nn.encoder_layer_forward(h, layer, mask, dropout)
        if stack.pair is not None:
            h = stack.pair.project_down(h)
        h = nn.encoder_layer_forward(h, stack.layers[-1], mask, dropout)
    else:
        for layer in stack.layers:
            h = nn.encoder_layer_forward(h, layer, mask, dropout)
    return stack.final_norm(h)


def encoder_forward(src_ids, model, src_real=None, dropout=None):
    src_ids = np.asarray(src_ids, dtype=np.int64)
    h = safe_forward(src_ids, model.enc_embed, causal=False, dropout=dropout)
    mask = _self_mask(src_ids.size, src_real, causal=False)
    return _stack_encode(h, model.encoder, mask, dropout)


def decoder_forward(tgt_ids, memory, model, src_real=None, tgt_real=None, dropout=None):
    if memory is None:
        raise ContractError("decoder_forward requires encoder memory")
    tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
    n_t, n_s = tgt_ids.size, memory.shape[0]
    h = safe_forward(tgt_ids, model.dec_embed, causal=True, dropout=dropout)
    self_mask = _self_mask(n_t, tgt_real, causal=True)
    mem_mask = None
    if src_real is not None and not bool(np.all(src_real)):
        mem_mask = padding_mask(src_real, n_t)

    stack = model.decoder
    if stack.sandwich:
        h = nn.decoder_layer_forward(h, memory, stack.layers[0], self_mask, mem_mask, dropout)
        mem_s = memory if stack.pair is None else stack.pair.project_up(memory)
        if stack.pair is not None:
            h = stack.pair.project_up(h)
        for layer in stack.layers[1:-1]:
            h = nn.decoder_layer_forward(h, mem_s, layer, self_mask, mem_mask, dropout)
        if stack.pair is not None:
            h = stack.pair.project_down(h)
        h = nn.decoder_layer_forward(h, memory, stack.layers[-1], self_mask, mem_mask, dropout)
    else:
        for layer in stack.layers:
            h = nn.decoder_layer_forward(h, memory, layer, self_mask, mem_mask, dropout)
    return stack.final_norm(h)


def forward(src_ids, tgt_ids, model, src_real=None, tgt_real=None, dropout=None):
    """Full seq2seq pipeline producing [n_tgt, V] logits."""
    if model.config.arch != "seq2seq":
        raise ContractError("forward(src, tgt) requires arch=seq2seq; use lm_forward")
    memory = encoder_forward(src_ids, model, src_real, dropout)
    h = decoder_forward(tgt_ids, memory, model, src_real, tgt_real, dropout)
    return output_logits(h, model)


def lm_forward(ids, model, real=None, dropout=None):
    """Decoder-only pipeline producing [n, V] next-token logits."""
    if model.config.arch != "lm":
        raise ContractError("lm_forward requires arch=lm; use forward(src, tgt)")
    ids = np.asarray(ids, dtype=np.int64)
    h = safe_forward(ids, model.embed, causal=True, dropout=dropout)
    mask = _self_mask(ids.size, real, causal=True)
    stack = model.decoder
    if stack.sandwich:
        h = nn.lm_layer_forward(h, stack.layers[0], mask, dropout)
        if stack.pair is not None:
            h = stack.pair.project_up(h)
        for layer in stack.layers[1:-1]:
            h = nn.lm_layer_forward(h, layer, mask, dropout)
        if stack.pair is not None:
            h = stack.pair.project_down(h)
        h = nn.lm_layer_forward(h, stack.layers[-1], mask, dropout)
    else:
        for layer in stack.layers:
            h = nn.lm_layer_forward(h, layer, mask, dropout)
    h = stack.final_norm(h)
    return output_logits(h, model)
