from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from conftest import tiny_config

from tilt import vocab
from tilt.layout import BBox, Document, Page, TaskInstance, Token
from tilt.model import Attention, Tilt, TiltConfig, make_batch
from tilt.objectives import to_seq2seq


def _example(words=("Total", "5.00", "Acme"), prompt="what is the total?", answer="5.00"):
    toks = tuple(Token(w, BBox(40 + 80 * i, 60 + 30 * i, 72 + 80 * i, 72 + 30 * i)) for i, w in enumerate(words))
    doc = Document("m", Page(512, 384), toks)
    return to_seq2seq(doc, TaskInstance("qa", prompt, (answer,)), max_src_len=64)


def test_config_validation():
    with pytest.raises(ValueError):
        TiltConfig(d_model=30, num_heads=4)
    with pytest.raises(ValueError):
        TiltConfig(attn_scale="cosine")
    with pytest.raises(ValueError):
        TiltConfig.from_dict({"d_model": 32, "colour": 1})
    cfg = tiny_config()
    assert TiltConfig.from_dict(cfg.to_dict()) == cfg


# -- attention -----------------------------------------------------------------


def test_single_key_gets_all_weight(tiny_cfg):
    attn = Attention(tiny_cfg)
    x = torch.randn(1, 1, tiny_cfg.d_model)
    attn(x, x, None, torch.ones(1, 1, dtype=torch.bool), keep_weights=True)
    assert torch.equal(attn.last_weights, torch.ones(1, 2, 1, 1))


def test_constant_bias_shift_is_invisible(tiny_cfg):
    attn = Attention(tiny_cfg)
    x = torch.randn(2, 5, tiny_cfg.d_model)
    mask = torch.ones(2, 5, dtype=torch.bool)
    bias = torch.randn(2, 5, 5)
    a = attn(x, x, bias, mask)
    b = attn(x, x, bias + 7.0, mask)
    assert torch.allclose(a, b, atol=1e-5)


def test_padded_keys_get_no_weight(tiny_cfg):
    attn = Attention(tiny_cfg)
    x = torch.randn(1, 4, tiny_cfg.d_model)
    mask = torch.tensor([[True, True, False, False]])
    attn(x, x, None, mask, keep_weights=True)
    assert float(attn.last_weights[..., 2:].max()) == 0.0


def test_token_count_divisor_matches_head_divisor_when_equal():
    # d_head = 16, so sqrt(n) and sqrt(d_head) coincide at 16 keys
    a = Attention(tiny_config(attn_scale="d_head"))
    b = Attention(tiny_config(attn_scale="n_tokens"))
    b.load_state_dict(a.state_dict())
    x = torch.randn(1, 16, 32)
    mask = torch.ones(1, 16, dtype=torch.bool)
    assert torch.allclose(a(x, x, None, mask), b(x, x, None, mask), atol=1e-6)
    assert not torch.allclose(a(x[:, :4], x[:, :4], None, mask[:, :4]), b(x[:, :4], x[:, :4], None, mask[:, :4]))


# -- whole model -----------------------------------------------------------------


def test_decoder_is_causal(tiny_cfg):
    model = Tilt(tiny_cfg).eval()
    batch = make_batch([_example()], tiny_cfg)
    memory = model.encode(batch)
    dec = batch.dec_in.clone()
    base = model.decode_logits(memory, batch.key_mask, dec)
    dec[0, -1] = (dec[0, -1] + 1) % 256
    moved = model.decode_logits(memory, batch.key_mask, dec)
    assert torch.equal(base[0, :-1], moved[0, :-1])
    assert not torch.equal(base[0, -1], moved[0, -1])


def test_uniform_logits_give_log_vocab_loss(tiny_cfg):
    model = Tilt(tiny_cfg)
    with torch.no_grad():
        model.embed.weight.zero_()
    loss = model.loss(make_batch([_example()], tiny_cfg))
    assert float(loss.detach()) == pytest.approx(math.log(tiny_cfg.vocab_size), rel=1e-6)


def test_empty_target_is_rejected(tiny_cfg):
    model = Tilt(tiny_cfg)
    batch = make_batch([_example()], tiny_cfg, with_targets=False)
    with pytest.raises(ValueError):
        model.loss(batch)


def test_page_positions_change_the_encoding(tiny_cfg):
    model = Tilt(tiny_cfg, vision=False).eval()
    batch = make_batch([_example()], tiny_cfg)
    a = model.encode(batch)
    n = int(batch.key_mask.sum())
    batch.centers[0, :n] = batch.centers[0, :n].flip(0)
    b = model.encode(batch)
    assert not torch.allclose(a, b)
    model.spatial_bias = False
    assert torch.allclose(model.encode(batch), model.encode(make_batch([_example()], tiny_cfg)))


def test_vision_switch_changes_the_encoding(tiny_cfg):
    model = Tilt(tiny_cfg).eval()
    batch = make_batch([_example()], tiny_cfg)
    on = model.encode(batch)
    model.vision_enabled = False
    off = model.encode(batch)
    assert not torch.allclose(on, off)
    model.vision_enabled = True
    u = model.image_embeddings(batch)[0].detach()
    prompt = batch.roi_index[0] < 0
    assert bool(prompt.any()) and float(u[prompt].abs().max()) == 0.0
    assert float(u[~prompt].abs().max()) > 0.0


def test_batch_padding_does_not_leak(tiny_cfg):
    model = Tilt(tiny_cfg).eval()
    short, long = _example(words=("a",)), _example(words=("one", "two", "three", "four"))
    alone = model.encode(make_batch([short], tiny_cfg))
    both = model.encode(make_batch([short, long], tiny_cfg))
    n = alone.shape[1]
    assert torch.allclose(alone[0], both[0, :n], atol=1e-5)


def _bucket(d: int, bidirectional: bool, num_buckets: int, max_distance: int) -> int:
    """Plain T5-style relative bucket, written out independently."""
    ret = 0
    n = -d
    if bidirectional:
        num_buckets //= 2
        if n < 0:
            ret += num_buckets
        n = abs(n)
    else:
        n = max(n, 0)
    exact = num_buckets // 2
    if n < exact:
        return ret + n
    val = exact + int(math.log(n / exact) / math.log(max_distance / exact) * (num_buckets - exact))
    return ret + min(val, num_buckets - 1)


def _reference_logits(model: Tilt, ids: torch.Tensor, dec_in: torch.Tensor) -> torch.Tensor:
    """Sequence-only encoder-decoder forward from raw weights."""
    cfg = model.cfg
    h, dh = cfg.num_heads, cfg.d_model // cfg.num_heads
    emb = model.embed.weight

    def rms(x, g):
        return x / torch.sqrt((x * x).mean(-1, keepdim=True) + 1e-6) * g

    def mha(att, xq, xkv, bias):
        q = (xq @ att.q.weight.T).view(-1, h, dh).transpose(0, 1)
        k = (xkv @ att.k.weight.T).view(-1, h, dh).transpose(0, 1)
        v = (xkv @ att.v.weight.T).view(-1, h, dh).transpose(0, 1)
        s = q @ k.transpose(1, 2) / math.sqrt(dh)
        if bias is not None:
            s = s + bias
        out = torch.softmax(s, -1) @ v
        return out.transpose(0, 1).reshape(-1, cfg.d_model) @ att.o.weight.T

    def ffn(ff, x):
        return F.gelu(x @ ff.wi.weight.T) @ ff.wo.weight.T

    n, m = len(ids), len(dec_in)
    enc_bias = torch.stack(
        [torch.stack([model.bias.seq[_bucket(j - i, True, 32, 128)] for j in range(n)]) for i in range(n)]
    ).permute(2, 0, 1)
    x = emb[ids]
    for layer in model.encoder:
        x = x + mha(layer.attn, rms(x, layer.norm1.weight), rms(x, layer.norm1.weight), enc_bias)
        x = x + ffn(layer.ff, rms(x, layer.norm2.weight))
    mem = rms(x, model.enc_norm.weight)

    dec_bias = torch.full((h, m, m), -1e9)
    for i in range(m):
        for j in range(i + 1):
            dec_bias[:, i, j] = model.dec_bias[_bucket(j - i, False, 32, 128)]
    y = emb[dec_in]
    for layer in model.decoder:
        y = y + mha(layer.self_attn, rms(y, layer.norm1.weight), rms(y, layer.norm1.weight), dec_bias)
        y = y + mha(layer.cross_attn, rms(y, layer.norm2.weight), mem, None)
        y = y + ffn(layer.ff, rms(y, layer.norm3.weight))
    return rms(y, model.dec_norm.weight) * cfg.d_model**-0.5 @ emb.T


def test_zero_spatial_tables_reduce_to_sequence_model(tiny_cfg):
    model = Tilt(tiny_cfg, vision=False).eval()
    with torch.no_grad():
        model.bias.horiz.zero_()
        model.bias.vert.zero_()
    batch = make_batch([_example()], tiny_cfg)
    with torch.no_grad():
        got = model.decode_logits(model.encode(batch), batch.key_mask, batch.dec_in)[0]
        want = _reference_logits(model, batch.ids[0], batch.dec_in[0])
    assert torch.allclose(got, want, atol=1e-4)


# -- generation ---------------------------------------------------------------------


def test_zero_length_generation(tiny_cfg):
    model = Tilt(tiny_cfg)
    assert model.generate(make_batch([_example()], tiny_cfg, with_targets=False), max_len=0) == [""]


def test_generation_is_deterministic_and_bounded(tiny_cfg):
    model = Tilt(tiny_cfg).eval()
    batch = make_batch([_example(), _example(words=("x",))], tiny_cfg, with_targets=False)
    a, b = model.generate(batch), model.generate(batch)
    assert a == b
    assert all(len(vocab.encode_target(s)) <= tiny_cfg.max_tgt_len for s in a)


def test_overfit_yes_and_none_answers(tiny_cfg):
    examples = [
        _example(prompt="is total > 4?", answer="yes"),
        to_seq2seq(Document("k", Page(512, 384), (Token("TOTAL", BBox(0, 0, 40, 12)),)), TaskInstance("kie", "DATE", ())),
    ]
    assert examples[1].target == "None"
    model = Tilt(tiny_cfg)
    batch = make_batch(examples, tiny_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for _ in range(200):
        opt.zero_grad()
        model.loss(batch).backward()
        opt.step()
    model.eval()
    assert model.generate(make_batch(examples, tiny_cfg, with_targets=False)) == ["yes", "None"]


def test_featurize_truncates_long_sources():
    cfg = tiny_config(max_src_len=16)
    ex = _example(words=tuple(f"word{i}" for i in range(10)))
    batch = make_batch([ex], cfg)
    assert batch.ids.shape[1] == 16 and batch.truncated == [True]
    assert np.all(batch.roi_index.numpy() < len(batch.roi_boxes[0]))
