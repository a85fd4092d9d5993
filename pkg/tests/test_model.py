import numpy as np
import numpy.testing as npt
import pytest

from subformer import Rng, Tape, Tensor, backward, grad_check
from subformer import tensor as T
from subformer.errors import ConfigError, ContractError, LengthError
from subformer.model import (ModelConfig, build, decoder_forward, encoder_forward,
                             forward, lm_forward, output_logits, randomize_params,
                             safe_forward, share_map)

from reference import extract_weights, vanilla_seq2seq_logits


def tiny_cfg(**kw):
    base = dict(V=13, d_e=8, d_m=8, d_s=8, dff_m=16, dff_s=16, L_enc=2, L_dec=2,
                n_heads=2, n_heads_safe=2, scheme="none", embed_mode="standard",
                tie_embeddings=True, max_len=16, arch="seq2seq")
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# share_map
# ---------------------------------------------------------------------------

def test_share_map_sandwich():
    m = share_map("sandwich", 6)
    assert m.attn == (0, 1, 1, 1, 1, 2)
    assert m.ffn == m.attn


def test_share_map_every2():
    assert share_map("every2", 6).attn == (0, 0, 1, 1, 2, 2)


def test_share_map_all_and_none():
    assert share_map("all", 6).attn == (0,) * 6
    assert share_map("none", 6).attn == tuple(range(6))


def test_share_map_indep_ffn_two_groups():
    m = share_map("all_indep_ffn", 6)
    assert m.attn == (0,) * 6
    assert m.ffn == (0, 1, 1, 1, 1, 1)


def test_share_map_errors():
    with pytest.raises(ConfigError):
        share_map("sandwich", 2)
    with pytest.raises(ConfigError):
        share_map("every2", 5)
    with pytest.raises(ConfigError):
        share_map("pyramid", 4)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_validation_rules():
    with pytest.raises(ConfigError, match="vocab"):
        tiny_cfg(V=1).validate()
    with pytest.raises(ConfigError, match="standard requires d_e == d_m"):
        tiny_cfg(d_e=4).validate()
    with pytest.raises(ConfigError, match="unless scheme=sandwich"):
        tiny_cfg(d_s=12).validate()
    with pytest.raises(ConfigError, match="divisible"):
        tiny_cfg(n_heads=3).validate()
    with pytest.raises(ConfigError, match="sandwich requires L >= 3"):
        tiny_cfg(scheme="sandwich", d_s=12, L_enc=2, L_dec=3).validate()
    with pytest.raises(ConfigError, match="every2 requires even L"):
        tiny_cfg(scheme="every2", L_enc=3, L_dec=2).validate()
    with pytest.raises(ConfigError, match="unknown scheme"):
        tiny_cfg(scheme="ladder").validate()
    with pytest.raises(ConfigError, match="layer count"):
        tiny_cfg(L_enc=0).validate()
    # lm ignores the encoder stack entirely
    tiny_cfg(arch="lm", L_enc=0, L_dec=2).validate()


# ---------------------------------------------------------------------------
# build and registry aliasing
# ---------------------------------------------------------------------------

def test_build_none_standard_matches_classic_layout():
    cfg = tiny_cfg()
    model = build(cfg, Rng(0))
    d, dff, V = cfg.d_m, cfg.dff_m, cfg.V
    attn = 4 * (d * d + d)
    ffn = d * dff + dff + dff * d + d
    ln = 2 * d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    expect = (V * d                      # shared E
              + 2 * enc_layer + 2 * dec_layer
              + 2 * ln                   # final norms
              + d * d + d)               # tied head projection
    assert model.registry.total_scalars() == expect


def test_build_all_scheme_single_group_per_stack():
    model = build(tiny_cfg(scheme="all", L_enc=6, L_dec=6), Rng(0))
    enc = model.encoder.layers
    dec = model.decoder.layers
    assert all(l.self_attn is enc[0].self_attn for l in enc)
    assert all(l.ffn is enc[0].ffn for l in enc)
    assert all(l.cross_attn is dec[0].cross_attn for l in dec)
    # none: all distinct
    m2 = build(tiny_cfg(L_enc=3, L_dec=3), Rng(0))
    attns = {id(l.self_attn.w_q) for l in m2.encoder.layers}
    assert len(attns) == 3


def test_sandwich_same_width_allocates_no_projection_pair():
    model = build(tiny_cfg(scheme="sandwich", L_enc=3, L_dec=3), Rng(0))
    assert model.encoder.pair is None and model.decoder.pair is None
    names = [n for n, _ in model.registry.distinct()]
    assert not any(".up." in n or ".down." in n for n in names)
    wide = build(tiny_cfg(scheme="sandwich", d_s=12, L_enc=3, L_dec=3), Rng(0))
    assert wide.encoder.pair is not None
    assert any(n.startswith("enc.up.") for n, _ in wide.registry.distinct())


def test_alias_groups_resolve_to_same_objects():
    model = build(tiny_cfg(scheme="every2", L_enc=4, L_dec=4), Rng(0))
    reg = model.registry
    for alias, canon in reg._aliases.items():
        assert reg.resolve(alias) is reg.resolve(canon)
    # spot-check: layer1 aliases layer0, layer3 aliases layer2
    assert reg.resolve("enc.layer1.attn.wq") is reg.resolve("enc.layer0.attn.wq")
    assert reg.resolve("enc.layer3.ffn.w1") is reg.resolve("enc.layer2.ffn.w1")
    assert reg.resolve("enc.layer2.attn.wq") is not reg.resolve("enc.layer0.attn.wq")


def test_indep_ffn_building():
    model = build(tiny_cfg(scheme="all_indep_ffn", L_enc=4, L_dec=4), Rng(0))
    enc = model.encoder.layers
    assert all(l.self_attn is enc[0].self_attn for l in enc)
    assert enc[1].ffn is not enc[0].ffn          # fresh group for layers 2..L
    assert enc[2].ffn is enc[1].ffn
    assert enc[3].ffn is enc[1].ffn


def test_init_statistics():
    model = build(tiny_cfg(), Rng(0))
    reg = model.registry
    assert np.abs(reg.resolve("enc.layer0.attn.wq").data).max() <= 0.04
    npt.assert_array_equal(reg.resolve("enc.layer0.attn.bq").data, np.zeros(8))
    npt.assert_array_equal(reg.resolve("enc.layer0.norm1.g").data, np.ones(8))
    npt.assert_array_equal(reg.resolve("enc.layer0.norm1.b").data, np.zeros(8))


def test_untied_embeddings_are_distinct():
    model = build(tiny_cfg(tie_embeddings=False), Rng(0))
    assert model.enc_embed.E is not model.dec_embed.E
    assert model.head_w.shape == (8, 13)
    tied = build(tiny_cfg(), Rng(0))
    assert tied.enc_embed.E is tied.dec_embed.E
    assert tied.head_w.shape == (8, 8)


# ---------------------------------------------------------------------------
# safe_forward
# ---------------------------------------------------------------------------

def test_safe_forward_linear_single_token():
    cfg = tiny_cfg(embed_mode="linear", d_e=4)
    model = build(cfg, Rng(1))
    emb = model.enc_embed
    out = safe_forward([5], emb)
    expect = (emb.E.data[5] + emb.pe[0]) @ emb.proj_w1.data + emb.proj_b1.data
    npt.assert_allclose(out.data[0], expect, rtol=0, atol=1e-12)


def test_safe_forward_standard_is_embedding_plus_pe():
    model = build(tiny_cfg(), Rng(2))
    emb = model.enc_embed
    out = safe_forward([3, 7], emb)
    npt.assert_array_equal(out.data, emb.E.data[[3, 7]] + emb.pe[:2])
    assert out.shape == (2, 8)


def test_safe_forward_linear2_two_projections():
    cfg = tiny_cfg(embed_mode="linear2", d_e=4)
    model = build(cfg, Rng(3))
    emb = model.enc_embed
    out = safe_forward([2, 9], emb)
    h = (emb.E.data[[2, 9]] + emb.pe[:2]) @ emb.proj_w1.data + emb.proj_b1.data
    expect = h @ emb.proj_w2.data + emb.proj_b2.data
    npt.assert_allclose(out.data, expect, rtol=0, atol=1e-14)
    assert out.shape == (2, 8)


def test_safe_forward_causal_insensitive_to_future():
    cfg = tiny_cfg(embed_mode="safe", d_e=4)
    model = build(cfg, Rng(4))
    emb = model.dec_embed
    ids_a = [3, 4, 5, 6]
    ids_b = [3, 4, 9, 12]
    out_a = safe_forward(ids_a, emb, causal=True).data
    out_b = safe_forward(ids_b, emb, causal=True).data
    npt.assert_allclose(out_a[:2], out_b[:2], rtol=0, atol=1e-12)
    # non-causal mode does feel the change
    assert np.abs(safe_forward(ids_a, emb).data[:2]
                  - safe_forward(ids_b, emb).data[:2]).max() > 1e-9


def test_safe_forward_rejects_overlong():
    model = build(tiny_cfg(max_len=4), Rng(5))
    with pytest.raises(LengthError):
        safe_forward([3, 3, 3, 3, 3], model.enc_embed)


# ---------------------------------------------------------------------------
# output logits
# ---------------------------------------------------------------------------

def test_output_logits_identity_projection_tied():
    model = build(tiny_cfg(), Rng(6))
    model.head_w.data = np.eye(8)
    model.head_b.data[:] = 0.0
    h = Tensor(Rng(7).normal((3, 8)))
    logits = output_logits(h, model)
    npt.assert_allclose(logits.data, h.data @ model.enc_embed.E.data.T,
                        rtol=0, atol=1e-12)
    assert logits.shape == (3, 13)


def test_tied_gradient_reaches_embedding_from_logits_path():
    model = build(tiny_cfg(embed_mode="safe", d_e=8), Rng(8))
    # token 11 appears only as the target, never as an input id
    with Tape():
        logits = forward([3, 4], [1, 3, 4], model)
        loss = T.cross_entropy(logits, [3, 4, 11])
        model.registry.zero_grads()
        backward(loss)
    E = model.enc_embed.E
    assert E.grad is not None
    assert np.abs(E.grad[11]).max() > 0.0


# ---------------------------------------------------------------------------
# stack forwards
# ---------------------------------------------------------------------------

def test_degeneracy_matches_vanilla_reference():
    cfg = tiny_cfg(L_enc=2, L_dec=2)
    model = build(cfg, Rng(9))
    src, tgt = [3, 5, 8, 2], [1, 4, 6]
    got = forward(src, tgt, model).data
    expect = vanilla_seq2seq_logits(extract_weights(model), src, tgt,
                                    heads=cfg.n_heads, L_enc=2, L_dec=2,
                                    max_len=cfg.max_len)
    assert np.abs(got - expect).max() <= 1e-10


def test_sandwich_L3_has_single_middle_application():
    model = build(tiny_cfg(scheme="sandwich", d_s=12, L_enc=3, L_dec=3), Rng(10))
    assert len(model.encoder.layers) == 3
    assert model.encoder.layers[1] is not model.encoder.layers[0]
    mid_L5 = build(tiny_cfg(scheme="sandwich", d_s=12, L_enc=5, L_dec=3), Rng(10))
    mids = mid_L5.encoder.layers[1:-1]
    assert len(mids) == 3 and all(m is mids[0] for m in mids)


def test_encoder_output_width_independent_of_sandwich_width():
    for d_s in (8, 12, 24):
        cfg = tiny_cfg(scheme="sandwich" if d_s != 8 else "none", d_s=d_s,
                       L_enc=3, L_dec=3)
        model = build(cfg, Rng(11))
        memory = encoder_forward([3, 4, 5], model)
        assert memory.shape == (3, 8)


def test_seq2seq_end_to_end_causality():
    cfg = tiny_cfg(embed_mode="safe", d_e=4, scheme="sandwich", d_s=12,
                   L_enc=3, L_dec=3)
    model = build(cfg, Rng(12))
    src = [3, 7, 9]
    tgt_a = [1, 3, 7, 9, 2]
    base = forward(src, tgt_a, model).data
    for t in range(len(tgt_a) - 1):
        tgt_b = list(tgt_a)
        tgt_b[t + 1] = (tgt_b[t + 1] + 3) % 13 or 3
        out = forward(src, tgt_b, model).data
        npt.assert_allclose(out[:t + 1], base[:t + 1], rtol=0, atol=1e-10)


def test_lm_forward_causality_and_shape():
    cfg = tiny_cfg(arch="lm", embed_mode="safe", d_e=4, scheme="sandwich",
                   d_s=12, L_enc=0, L_dec=3)
    model = build(cfg, Rng(13))
    ids = [3, 4, 5, 6, 7]
    logits = lm_forward(ids, model)
    assert logits.shape == (5, 13)
    changed = [3, 4, 5, 11, 12]
    logits2 = lm_forward(changed, model)
    npt.assert_allclose(logits2.data[:3], logits.data[:3], rtol=0, atol=1e-12)


def test_arch_mismatch_contract_errors():
    s2s = build(tiny_cfg(), Rng(14))
    lm = build(tiny_cfg(arch="lm", L_enc=0), Rng(14))
    with pytest.raises(ContractError):
        lm_forward([3, 4], s2s)
    with pytest.raises(ContractError):
        forward([3], [1, 3], lm)
    with pytest.raises(ContractError):
        decoder_forward([1, 3], None, s2s)


def test_loss_finite_on_random_batch():
    for scheme, d_s in (("none", 8), ("all", 8), ("sandwich", 12)):
        cfg = tiny_cfg(embed_mode="safe", d_e=4, scheme=scheme, d_s=d_s,
                       L_enc=3, L_dec=3)
        model = build(cfg, Rng(15))
        logits = forward([3, 4, 5], [1, 5, 4, 3, 2], model)
        loss = T.cross_entropy(logits, [5, 4, 3, 2, 2], label_smoothing=0.1)
        assert np.isfinite(float(loss.data))


# ---------------------------------------------------------------------------
# shared-gradient oracle
# ---------------------------------------------------------------------------

def test_shared_gradient_equals_sum_of_unshared_copies():
    cfg_shared = tiny_cfg(arch="lm", L_enc=0, L_dec=2, scheme="all")
    cfg_plain = tiny_cfg(arch="lm", L_enc=0, L_dec=2, scheme="none")
    shared = build(cfg_shared, Rng(16))
    plain = build(cfg_plain, Rng(17))

    # make the two unshared layers exact copies of the shared layer, and
    # align the embedding/head so both models compute the same function
    for name, t in shared.registry.distinct():
        if name.startswith("dec.layer0."):
            for i in (0, 1):
                plain.registry.resolve(name.replace("layer0", f"layer{i}")).data = t.data.copy()
        else:
            plain.registry.resolve(name).data = t.data.copy()

    ids = [3, 4, 5, 6]
    targets = [4, 5, 6, 7]

    def loss_of(model):
        with Tape():
            loss = T.cross_entropy(lm_forward(ids, model), targets)
            model.registry.zero_grads()
            backward(loss)
        return loss

    la = loss_of(shared)
    lb = loss_of(plain)
    npt.assert_allclose(float(la.data), float(lb.data), rtol=0, atol=1e-12)

    for name, t in shared.registry.distinct():
        if not name.startswith("dec.layer0."):
            continue
        g0 = plain.registry.resolve(name).grad
        g1 = plain.registry.resolve(name.replace("layer0", "layer1")).grad
        npt.assert_allclose(t.grad, g0 + g1, rtol=0, atol=1e-10)


def test_tiny_seq2seq_grad_check():
    # weights redrawn at a well-conditioned scale; h=1e-4 keeps the
    # finite-difference noise floor far below the 1e-4 bar
    cfg = tiny_cfg(embed_mode="safe", d_e=4, V=7, L_enc=1, L_dec=1, dff_m=6)
    model = randomize_params(build(cfg, Rng(18)), Rng(19))

    def f():
        logits = forward([3, 4], [1, 3, 4], model)
        return T.cross_entropy(logits, [3, 4, 2])

    tensors = [t for _, t in model.registry.distinct()]
    assert grad_check(f, tensors, h=1e-4, zero_tol=1e-7) < 1e-4
