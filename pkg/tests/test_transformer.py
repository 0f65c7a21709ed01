import math

import numpy as np
import pytest

from progen import tensor as T
from progen.exceptions import ConfigError, DataError, ShapeError
from progen.tensor import Tensor, gradcheck, no_grad
from progen.transformer import (
    Decoder,
    Encoder,
    MeshedCrossAttention,
    MultiHeadAttention,
    TransformerConfig,
    positional_encoding,
)


def tiny_cfg(**kw):
    base = dict(d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=16,
                memory_slots=2, mesh=True, dropout=0.0, max_len=16)
    base.update(kw)
    return TransformerConfig(**base)


# -- independent numpy oracles


def np_softmax(x):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        e = np.array([math.exp(v - row.max()) for v in row])
        out[i] = e / e.sum()
    return out


def np_linear(x, lin):
    return x @ lin.weight.data + lin.bias.data


def naive_attention(mha, q_in, kv_in, mask=None, mem_k=None, mem_v=None):
    """Loop over examples and heads; memory rows appended explicitly."""
    B, Tq, d = q_in.shape
    H = mha.n_heads
    dh = d // H
    out = np.zeros((B, Tq, d))
    for b in range(B):
        q = np_linear(q_in[b], mha.q_proj)
        k = np_linear(kv_in[b], mha.k_proj)
        v = np_linear(kv_in[b], mha.v_proj)
        keep = np.ones((Tq, k.shape[0]), bool) if mask is None else np.broadcast_to(mask[b if mask.shape[0] > 1 else 0], (Tq, k.shape[0]))
        if mem_k is not None:
            k = np.vstack([k, mem_k])
            v = np.vstack([v, mem_v])
            keep = np.hstack([keep, np.ones((Tq, mem_k.shape[0]), bool)])
        heads = []
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            s = np.where(keep, s, -np.inf)
            heads.append(np_softmax(s) @ v[:, sl])
        out[b] = np_linear(np.hstack(heads), mha.out_proj)
    return out


def np_layer_norm(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.gain.data + ln.bias.data


def np_ff(x, ff):
    return np_linear(np.maximum(np_linear(x, ff.fc1), 0), ff.fc2)


def np_sigmoid(x):
    return 1 / (1 + np.exp(-x))


# -- positional encoding


def test_positional_first_row():
    pe = positional_encoding(10, 6)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])


def test_positional_range_and_value():
    pe = positional_encoding(200, 32)
    assert pe.min() >= -1 and pe.max() <= 1
    assert abs(pe[1, 0] - math.sin(1)) < 1e-15
    assert abs(pe[1, 0] - 0.841471) < 1e-6


def test_positional_odd_width():
    with pytest.raises(ConfigError):
        positional_encoding(4, 5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TransformerConfig(d_model=10, n_heads=4)


# -- attention


def test_attention_saturation():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention(4, 1, rng)
    for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
        lin.weight.data[...] = np.eye(4)
    q = np.zeros((1, 1, 4))
    q[0, 0, 0] = 100.0
    kv = np.zeros((1, 3, 4))
    kv[0, 1] = [100.0, 2.0, 3.0, 4.0]
    out = mha(Tensor(q), Tensor(kv))
    np.testing.assert_allclose(out.data[0, 0], kv[0, 1], atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention(8, 2, rng, memory_slots=3)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    keep = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)[:, None, :]
    _, w = mha(x, x, keep, return_weights=True)
    assert w.shape == (2, 2, 5, 8)
    assert np.abs(w.sum(-1) - 1).max() < 1e-12
    # padded keys get exactly zero weight
    assert np.all(w[0, :, :, 3:5] == 0.0)


def test_attention_matches_per_head_oracle():
    rng = np.random.default_rng(2)
    for trial in range(10):
        mha = MultiHeadAttention(8, 2, rng)
        q = rng.normal(size=(2, 3, 8))
        kv = rng.normal(size=(2, 4, 8))
        keep = rng.random((2, 1, 4)) > 0.3
        keep[:, :, 0] = True
        got = mha(Tensor(q), Tensor(kv), keep).data
        np.testing.assert_allclose(got, naive_attention(mha, q, kv, keep), atol=1e-10, rtol=0)


def test_attention_mask_shape_error():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    with pytest.raises(ShapeError):
        mha(x, x, np.ones((1, 3, 4), bool))


def _copy_weights(dst, src):
    for (n1, p1), (n2, p2) in zip(dst.named_parameters(), src.named_parameters()):
        p1.data[...] = p2.data


def test_memory_zero_is_standard_attention_bitwise():
    rng = np.random.default_rng(4)
    for _ in range(20):
        plain = MultiHeadAttention(8, 2, rng)
        mem0 = MultiHeadAttention(8, 2, rng, memory_slots=0)
        _copy_weights(mem0, plain)
        x = Tensor(rng.normal(size=(2, 4, 8)))
        keep = rng.random((2, 1, 4)) > 0.2
        keep[:, :, 0] = True
        assert plain(x, x, keep).data.tobytes() == mem0(x, x, keep).data.tobytes()


def test_memory_attention_shape_contract():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(8, 2, rng, memory_slots=2)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    _, w = mha(x, x, return_weights=True)
    assert w.shape[-1] == 5
    assert np.abs(w.sum(-1) - 1).max() < 1e-12


def test_memory_attention_matches_concat_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        mha = MultiHeadAttention(8, 2, rng, memory_slots=3)
        x = rng.normal(size=(2, 4, 8))
        keep = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)[:, None, :]
        got = mha(Tensor(x), Tensor(x), keep).data
        want = naive_attention(mha, x, x, keep, mha.memory_k.data, mha.memory_v.data)
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_memory_slots_shared_across_batch():
    rng = np.random.default_rng(7)
    mha = MultiHeadAttention(8, 2, rng, memory_slots=2)
    x = rng.normal(size=(1, 3, 8))
    alone = mha(Tensor(x), Tensor(x)).data
    batch = np.concatenate([x, rng.normal(size=(1, 3, 8))])
    together = mha(Tensor(batch), Tensor(batch)).data
    np.testing.assert_allclose(together[0], alone[0], atol=1e-14)


# -- meshed cross-attention


def _pin_gates(mesh, value):
    for g in mesh.gates:
        g.weight.data[...] = 0.0
        g.bias.data[...] = value


def test_mesh_single_layer_pinned_open_is_plain_cross_attention():
    rng = np.random.default_rng(8)
    mesh = MeshedCrossAttention(8, 2, 1, rng)
    _pin_gates(mesh, 1e3)
    h = Tensor(rng.normal(size=(2, 3, 8)))
    enc = Tensor(rng.normal(size=(2, 5, 8)))
    assert mesh(h, [enc]).data.tobytes() == mesh.attn(h, enc).data.tobytes()


def test_mesh_gates_closed_gives_zero():
    rng = np.random.default_rng(9)
    mesh = MeshedCrossAttention(8, 2, 3, rng)
    _pin_gates(mesh, -1e3)
    h = Tensor(rng.normal(size=(1, 3, 8)))
    encs = [Tensor(rng.normal(size=(1, 4, 8))) for _ in range(3)]
    np.testing.assert_array_equal(mesh(h, encs).data, 0.0)


def test_mesh_two_layers_matches_oracle():
    rng = np.random.default_rng(10)
    for _ in range(10):
        mesh = MeshedCrossAttention(8, 2, 2, rng)
        h = rng.normal(size=(2, 3, 8))
        encs = [rng.normal(size=(2, 4, 8)) for _ in range(2)]
        keep = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], bool)[:, None, :]
        total = 0.0
        for enc, gate in zip(encs, mesh.gates):
            c = naive_attention(mesh.attn, h, enc, keep)
            total = total + np_sigmoid(np_linear(np.concatenate([h, c], -1), gate)) * c
        want = total / math.sqrt(2)
        got = mesh(Tensor(h), [Tensor(e) for e in encs], keep).data
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_mesh_needs_encoder_outputs():
    rng = np.random.default_rng(11)
    mesh = MeshedCrossAttention(8, 2, 1, rng)
    with pytest.raises(ShapeError):
        mesh(Tensor(np.zeros((1, 1, 8))), [])


# -- encoder / decoder stacks


def test_encoder_returns_all_layers():
    rng = np.random.default_rng(12)
    enc = Encoder(tiny_cfg(n_enc_layers=3), rng)
    outs = enc(Tensor(rng.normal(size=(2, 5, 8))))
    assert len(outs) == 3
    assert all(o.shape == (2, 5, 8) for o in outs)


def test_encoder_overlength():
    rng = np.random.default_rng(13)
    enc = Encoder(tiny_cfg(max_len=4), rng)
    with pytest.raises(DataError):
        enc(Tensor(np.zeros((1, 5, 8))))


def test_encoder_padding_invariance():
    rng = np.random.default_rng(14)
    enc = Encoder(tiny_cfg(), rng)
    for _ in range(50):
        S = int(rng.integers(2, 7))
        n_real = int(rng.integers(1, S + 1))
        keep = np.zeros((1, S), bool)
        keep[0, :n_real] = True
        x = rng.normal(size=(1, S, 8))
        y = x.copy()
        y[0, n_real:] += rng.normal(scale=5, size=(S - n_real, 8))
        a = enc(Tensor(x), keep)[-1].data[0, :n_real]
        b = enc(Tensor(y), keep)[-1].data[0, :n_real]
        assert np.abs(a - b).max() < 1e-10


def vanilla_encoder_oracle(enc, x, keep):
    h = x + enc._pe[: x.shape[1]]
    outs = []
    for layer in enc.layers:
        a = naive_attention(layer.self_attn, h, h, keep[:, None, :])
        h = np_layer_norm(h + a, layer.norm1)
        h = np_layer_norm(h + np_ff(h, layer.ff), layer.norm2)
        outs.append(h)
    return outs


def test_encoder_memoryless_matches_vanilla_oracle():
    rng = np.random.default_rng(15)
    enc = Encoder(tiny_cfg(memory_slots=0, mesh=False), rng)
    x = rng.normal(size=(2, 5, 8))
    keep = np.array([[1, 1, 1, 1, 0], [1] * 5], bool)
    got = enc(Tensor(x), keep)
    want = vanilla_encoder_oracle(enc, x, keep)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g.data, w, atol=1e-10, rtol=0)


def vanilla_decoder_oracle(dec, ids, enc_last, enc_keep):
    Tn = ids.shape[1]
    y = dec.embed.weight.data[ids] * math.sqrt(dec.d_model) + dec._pe[:Tn]
    causal = np.tril(np.ones((Tn, Tn), bool))[None]
    for layer in dec.layers:
        y = np_layer_norm(y + naive_attention(layer.self_attn, y, y, causal), layer.norm1)
        cross = layer.cross.attn if layer.mesh else layer.cross
        y = np_layer_norm(y + naive_attention(cross, y, enc_last, enc_keep[:, None, :]), layer.norm2)
        y = np_layer_norm(y + np_ff(y, layer.ff), layer.norm3)
    return np_linear(y, dec.head)


def test_decoder_shape():
    rng = np.random.default_rng(16)
    cfg = tiny_cfg()
    dec = Decoder(cfg, 11, rng)
    encs = [Tensor(rng.normal(size=(1, 4, 8))) for _ in range(2)]
    assert dec([[1, 5, 6]], encs).shape == (1, 3, 11)


def test_decoder_causality():
    rng = np.random.default_rng(17)
    cfg = tiny_cfg()
    dec = Decoder(cfg, 9, rng)
    encs = [Tensor(rng.normal(size=(1, 4, 8))) for _ in range(2)]
    for _ in range(50):
        Tn = int(rng.integers(2, 8))
        ids = rng.integers(0, 9, size=(1, Tn))
        t = int(rng.integers(0, Tn - 1))
        other = ids.copy()
        other[0, t + 1:] = rng.integers(0, 9, size=Tn - t - 1)
        a = dec(ids, encs).data[0, : t + 1]
        b = dec(other, encs).data[0, : t + 1]
        assert np.abs(a - b).max() < 1e-10


def test_decoder_vanilla_matches_oracle():
    rng = np.random.default_rng(18)
    cfg = tiny_cfg(memory_slots=0, mesh=False)
    dec = Decoder(cfg, 7, rng)
    ids = rng.integers(0, 7, size=(2, 4))
    encs = [Tensor(rng.normal(size=(2, 3, 8))) for _ in range(2)]
    keep = np.array([[1, 1, 0], [1, 1, 1]], bool)
    got = dec(ids, encs, enc_keep=keep).data
    np.testing.assert_allclose(got, vanilla_decoder_oracle(dec, ids, encs[-1].data, keep), atol=1e-10, rtol=0)


def test_mesh_single_layer_pinned_equals_vanilla_decoder():
    rng = np.random.default_rng(19)
    meshed = Decoder(tiny_cfg(n_enc_layers=1, mesh=True), 7, np.random.default_rng(0))
    for layer in meshed.layers:
        _pin_gates(layer.cross, 1e3)
    ids = rng.integers(0, 7, size=(2, 5))
    enc = [Tensor(rng.normal(size=(2, 3, 8)))]
    keep = np.array([[1, 1, 1], [1, 0, 0]], bool)
    got = meshed(ids, enc, enc_keep=keep).data
    # the oracle ignores gates and uses last-layer attention only
    np.testing.assert_allclose(got, vanilla_decoder_oracle(meshed, ids, enc[0].data, keep), atol=1e-10, rtol=0)

    vanilla = Decoder(tiny_cfg(n_enc_layers=1, mesh=False), 7, np.random.default_rng(0))
    for lv, lm in zip(vanilla.layers, meshed.layers):
        _copy_weights(lv.cross, lm.cross.attn)
        for name in ("self_attn", "norm1", "norm2", "ff", "norm3"):
            _copy_weights(getattr(lv, name), getattr(lm, name))
    _copy_weights(vanilla.embed, meshed.embed)
    _copy_weights(vanilla.head, meshed.head)
    assert vanilla(ids, enc, enc_keep=keep).data.tobytes() == got.tobytes()


# -- module-level gradient checks


def _gradcheck_module(module, loss_fn):
    params = module.parameters()
    return gradcheck(loss_fn, params)


def test_gradcheck_memory_attention():
    rng = np.random.default_rng(20)
    mha = MultiHeadAttention(8, 2, rng, memory_slots=2)
    x = rng.normal(size=(2, 3, 8))
    w = rng.normal(size=(2, 3, 8))
    assert _gradcheck_module(mha, lambda: T.sum_(mha(Tensor(x), Tensor(x)) * w)) < 1e-4


def test_gradcheck_meshed_cross_attention():
    rng = np.random.default_rng(21)
    mesh = MeshedCrossAttention(8, 2, 2, rng)
    h = rng.normal(size=(1, 3, 8))
    encs = [rng.normal(size=(1, 4, 8)) for _ in range(2)]
    w = rng.normal(size=(1, 3, 8))
    assert _gradcheck_module(mesh, lambda: T.sum_(mesh(Tensor(h), [Tensor(e) for e in encs]) * w)) < 1e-4


def test_gradcheck_encoder_decoder():
    rng = np.random.default_rng(22)
    cfg = tiny_cfg()
    enc = Encoder(cfg, rng)
    dec = Decoder(cfg, 6, rng)
    x = rng.normal(size=(2, 3, 8))
    keep = np.array([[1, 1, 0], [1, 1, 1]], bool)
    ids = np.array([[1, 4, 5], [1, 2, 0]])
    tgt = np.array([[4, 5, 2], [2, 2, 0]])

    def loss():
        outs = enc(Tensor(x), keep)
        return T.cross_entropy(dec(ids, outs, enc_keep=keep), tgt, pad_id=0)

    params = enc.parameters() + dec.parameters()
    assert gradcheck(loss, params) < 1e-4
