"""Closed-form parameter accounting and golden-table reporting.

The formulas mirror the builder exactly (biases and norm affines included):
    attention block at width d:      4*(d^2 + d)
    feed-forward d_in->d_h->d_out:   d_in*d_h + d_h + d_h*d_out + d_out
    layer norm at width d:           2*d
    embedding matrix:                V * d_e
    tied output head:                d_m*d_e + d_e   (untied: d_m*V + V)
Sharing multiplicities come from share_map, so the totals agree with the
registry enumeration integer-for-integer.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .model import ModelConfig, share_map


def _attn(d):
    return 4 * (d * d + d)


def _ffn(d_in, d_h, d_out):
    return d_in * d_h + d_h + d_h * d_out + d_out


def _ln(d):
    return 2 * d


@dataclass(frozen=True)
class ParamBreakdown:
    embedding: int
    safe_projection: int
    encoder_model_layers: int
    encoder_sandwich: int
    decoder_model_layers: int
    decoder_sandwich: int
    projections: int
    output_head: int
    norms: int

    @property
    def total(self):
        return (self.embedding + self.safe_projection
                + self.encoder_model_layers + self.encoder_sandwich
                + self.decoder_model_layers + self.decoder_sandwich
                + self.projections + self.output_head + self.norms)

    def as_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["total"] = self.total
        return d


def _embedding_projection(cfg):
    """Projection cost of ONE embedding module (beyond the E matrix)."""
    if cfg.embed_mode == "standard":
        return 0
    if cfg.embed_mode == "linear":
        return cfg.d_e * cfg.d_m + cfg.d_m
    if cfg.embed_mode == "linear2":
        return (cfg.d_e * cfg.d_e + cfg.d_e) + (cfg.d_e * cfg.d_m + cfg.d_m)
    # safe: attention at d_e, two pre-norms, ffn d_e -> d_m with hidden d_m
    return _attn(cfg.d_e) + 2 * _ln(cfg.d_e) + _ffn(cfg.d_e, cfg.d_m, cfg.d_m)


def _stack_layer_costs(cfg, L, cross, shared=True):
    """(model_layer_params, sandwich_layer_params) for one stack.

    With shared=False every layer counts individually (the no-sharing twin
    of the same architecture).
    """
    smap = share_map(cfg.scheme, L)
    sandwich = cfg.scheme == "sandwich"

    def width(i):
        return (cfg.d_s, cfg.dff_s) if sandwich and 0 < i < L - 1 else (cfg.d_m, cfg.dff_m)

    model = mid = 0
    attn_counted, ffn_counted = set(), set()
    for i in range(L):
        d, dff = width(i)
        is_mid = sandwich and 0 < i < L - 1
        if shared:
            count_attn = smap.attn[i] not in attn_counted
            count_ffn = smap.ffn[i] not in ffn_counted
            attn_counted.add(smap.attn[i])
            ffn_counted.add(smap.ffn[i])
        else:
            count_attn = count_ffn = True
        part = 0
        if count_attn:
            part += _attn(d) + 2 * _ln(d)          # self-attention + norm1 + norm2
            if cross:
                part += _attn(d) + _ln(d)          # cross-attention + norm3
        if count_ffn:
            part += _ffn(d, dff, d)
        if is_mid:
            mid += part
        else:
            model += part
    return model, mid


def _projection_cost(cfg):
    if cfg.scheme != "sandwich" or cfg.d_s == cfg.d_m:
        return 0
    up = _ln(cfg.d_m) + _ffn(cfg.d_m, cfg.d_s, cfg.d_s)
    down = _ln(cfg.d_s) + _ffn(cfg.d_s, cfg.d_m, cfg.d_m)
    return up + down


def count_params(cfg, shared=True):
    """Closed-form breakdown for a configuration.

    shared=False counts the identical architecture with no weight sharing,
    which is the baseline for "how much does sharing save".
    """
    cfg.validate()
    is_lm = cfg.arch == "lm"
    n_embeds = 1 if is_lm else 2
    n_E = 1 if (is_lm or cfg.tie_embeddings) else 2

    embedding = n_E * cfg.V * cfg.d_e
    safe_projection = n_embeds * _embedding_projection(cfg)

    if is_lm:
        enc_model = enc_mid = 0
        dec_model, dec_mid = _stack_layer_costs(cfg, cfg.L_dec, cross=False, shared=shared)
        projections = _projection_cost(cfg)           # one stack
        norms = _ln(cfg.d_m)
    else:
        enc_model, enc_mid = _stack_layer_costs(cfg, cfg.L_enc, cross=False, shared=shared)
        dec_model, dec_mid = _stack_layer_costs(cfg, cfg.L_dec, cross=True, shared=shared)
        projections = 2 * _projection_cost(cfg)       # encoder and decoder pairs
        norms = 2 * _ln(cfg.d_m)

    if cfg.tie_embeddings:
        head = cfg.d_m * cfg.d_e + cfg.d_e
    else:
        head = cfg.d_m * cfg.V + cfg.V

    return ParamBreakdown(
        embedding=embedding,
        safe_projection=safe_projection,
        encoder_model_layers=enc_model,
        encoder_sandwich=enc_mid,
        decoder_model_layers=dec_model,
        decoder_sandwich=dec_mid,
        projections=projections,
        output_head=head,
        norms=norms,
    )


def unshared_total(cfg):
    """Total of the same architecture with no cross-layer sharing at all."""
    return count_params(cfg, shared=False).total


def count_actual(model):
    """Sum of extents over the registry's distinct tensors."""
    return model.registry.total_scalars()


# ---------------------------------------------------------------------------
# report tables
# ---------------------------------------------------------------------------

CSV_HEADER = "name,total,embedding,encoder,decoder,projections,head"


def _csv_fields(name, bd):
    return (name, bd.total, bd.embedding + bd.safe_projection,
            bd.encoder_model_layers + bd.encoder_sandwich,
            bd.decoder_model_layers + bd.decoder_sandwich,
            bd.projections, bd.output_head)


def report_csv(entries):
    """entries: iterable of (name, ModelConfig). Raw integer counts."""
    lines = [CSV_HEADER]
    for name, cfg in entries:
        lines.append(",".join(str(v) for v in _csv_fields(name, count_params(cfg))))
    return "\n".join(lines) + "\n"


def report_table(entries):
    """Aligned text table; totals in millions with one decimal."""
    rows = [("name", "params", "emb(M)", "enc(M)", "dec(M)", "proj(M)", "head(M)")]
    for name, cfg in entries:
        bd = count_params(cfg)
        _, total, emb, enc, dec, proj, head = _csv_fields(name, bd)
        rows.append((name, f"{total / 1e6:.1f}M", f"{emb / 1e6:.1f}", f"{enc / 1e6:.1f}",
                     f"{dec / 1e6:.1f}", f"{proj / 1e6:.1f}", f"{head / 1e6:.1f}"))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    out = []
    for i, row in enumerate(rows):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            out.append("-" * len(out[0]))
    return "\n".join(out) + "\n"


def golden_table(rows):
    """rows: (name, cfg, paper_millions). Adds paper and delta columns."""
    header = ("name", "computed", "reported", "delta")
    body = []
    for name, cfg, paper_m in rows:
        total = count_params(cfg).total
        delta = (total - paper_m * 1e6) / (paper_m * 1e6) * 100.0
        body.append((name, f"{total / 1e6:.1f}M", f"{paper_m:.0f}M", f"{delta:+.1f}%"))
    all_rows = [header] + body
    widths = [max(len(r[c]) for r in all_rows) for c in range(4)]
    out = []
    for i, row in enumerate(all_rows):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            out.append("-" * len(out[0]))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# golden-table presets
# ---------------------------------------------------------------------------

def _base_cfg(**kw):
    base = dict(V=32768, d_e=512, d_m=512, d_s=512, dff_m=2048, dff_s=2048,
                L_enc=6, L_dec=6, n_heads=8, n_heads_safe=4, scheme="none",
                embed_mode="standard", tie_embeddings=True, max_len=512, arch="seq2seq")
    base.update(kw)
    return ModelConfig(**base)


def sharing_table_rows():
    """Sharing-scheme sweep at base dimensions, with reported totals."""
    return [
        ("all-shared", _base_cfg(scheme="all"), 24),
        ("all-shared-768", _base_cfg(scheme="all", d_m=768, d_s=768, d_e=768,
                                     dff_m=3072, dff_s=3072), 41),
        ("indep-ffn", _base_cfg(scheme="all_indep_ffn"), 27),
        ("except-last", _base_cfg(scheme="all_except_last"), 31),
        ("every2", _base_cfg(scheme="every2"), 38),
        ("sandwich", _base_cfg(scheme="sandwich"), 38),
        ("sandwich-L8", _base_cfg(scheme="sandwich", L_enc=8, L_dec=8), 38),
        ("unshared-base", _base_cfg(scheme="none"), 61),
    ]


def embedding_table_rows():
    """Embedding-factorization sweep on the unshared base model."""
    return [
        ("linear-de128", _base_cfg(embed_mode="linear", d_e=128), 48),
        ("linear-de256", _base_cfg(embed_mode="linear", d_e=256), 53),
        ("linear2-de256", _base_cfg(embed_mode="linear2", d_e=256), 54),
        ("safe-de128", _base_cfg(embed_mode="safe", d_e=128), 48),
        ("safe-de256", _base_cfg(embed_mode="safe", d_e=256), 54),
        ("standard-de512", _base_cfg(), 61),
    ]
