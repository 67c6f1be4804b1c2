from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from tilt.layout import BBox, Document, Page, Token
from tilt.numerics import finite_difference, relative_error
from tilt.spatial_bias import (
    AXIS_BUCKETS,
    DECODER_BUCKETS,
    SEQ_BUCKETS,
    BiasParams,
    BucketConfig,
    bucket_1d,
    bucket_axis,
    bucket_tensor,
    build_bias,
    causal_bias,
    spatial_scale_augment,
)


def test_bucket_examples():
    assert bucket_1d(0) == 0
    assert bucket_1d(5) == 21
    assert bucket_1d(-100000) == 15
    assert bucket_axis(0) == 0
    assert bucket_axis(10) == 24


def test_axis_sign_halves():
    for dx in range(1, 64):
        assert bucket_axis(dx) - bucket_axis(-dx) == 16


@given(st.integers(-5000, 5000))
def test_bucket_range_and_tensor_agree(d):
    for cfg in (SEQ_BUCKETS, AXIS_BUCKETS, DECODER_BUCKETS):
        b = bucket_1d(d, cfg)
        assert 0 <= b < cfg.num_buckets
        assert int(bucket_tensor(torch.tensor([d]), cfg)[0]) == b


def test_decoder_buckets_ignore_future():
    assert {bucket_1d(d, DECODER_BUCKETS) for d in range(0, 50)} == {0}
    assert bucket_1d(-3, DECODER_BUCKETS) == 3
    assert bucket_1d(-10_000, DECODER_BUCKETS) == 31


def test_bucket_config_validation():
    with pytest.raises(ValueError):
        BucketConfig(31, 128)


def test_zero_tables_give_zero_bias():
    p = BiasParams(3)
    with torch.no_grad():
        for t in (p.seq, p.horiz, p.vert):
            t.zero_()
    assert bool((build_bias(torch.tensor([[1, 2], [5, 9], [0, 0]]), p) == 0).all())


def test_single_token_bias():
    p = BiasParams(2)
    b = build_bias(torch.tensor([[7, 3]]), p)
    assert b.shape == (2, 1, 1)
    assert torch.allclose(b[:, 0, 0], p.seq[0] + p.horiz[0] + p.vert[0])


def test_row_translation_example():
    p = BiasParams(4)
    c = torch.tensor([[2, 2], [6, 2], [10, 2]])
    assert torch.equal(build_bias(c, p), build_bias(c + torch.tensor([7, 3]), p))


def test_bias_entry_matches_formula():
    p = BiasParams(2)
    c = torch.tensor([[3, 4], [13, 1], [3, 30]])
    b = build_bias(c, p)
    for i in range(3):
        for j in range(3):
            want = (
                p.seq[bucket_1d(j - i, SEQ_BUCKETS)]
                + p.horiz[bucket_axis(int(c[j, 0] - c[i, 0]))]
                + p.vert[bucket_axis(int(c[j, 1] - c[i, 1]))]
            )
            assert torch.allclose(b[:, i, j], want)


def test_sequential_term_ignores_page_positions():
    p = BiasParams(2)
    c = torch.tensor([[3, 4], [13, 1], [3, 30]])
    shuffled = c[[2, 0, 1]]
    seq_a = build_bias(c, p, spatial=False)
    seq_b = build_bias(shuffled, p, spatial=False)
    assert torch.equal(seq_a, seq_b)
    assert not torch.equal(build_bias(c, p), build_bias(shuffled, p))


def test_batched_bias_matches_single():
    p = BiasParams(2)
    a = torch.tensor([[3, 4], [13, 1]])
    b = torch.tensor([[0, 0], [1, 40]])
    both = build_bias(torch.stack([a, b]), p)
    assert torch.equal(both[0], build_bias(a, p)) and torch.equal(both[1], build_bias(b, p))


def test_bias_gradient_matches_finite_differences():
    p = BiasParams(2).double()
    c = torch.tensor([[3, 4], [13, 1], [3, 30], [40, 40]])
    w = torch.randn(2, 4, 4, dtype=torch.float64)

    def loss():
        return (torch.tanh(build_bias(c, p)) * w).sum()

    params = {"seq": p.seq, "horiz": p.horiz, "vert": p.vert}
    grads = dict(zip(params, torch.autograd.grad(loss(), list(params.values()))))
    for name, t in params.items():
        for b in range(0, 32, 3):
            for h in range(2):
                num = finite_difference(loss, t.data, (b, h))
                assert relative_error(float(grads[name][b, h]), num, 1e-8) < 1e-6


def test_causal_bias_shape():
    table = torch.randn(32, 3)
    b = causal_bias(5, table)
    assert b.shape == (3, 5, 5)
    assert torch.equal(b[:, 4, 1], table[3])


def _doc():
    toks = (Token("a", BBox(100, 100, 120, 112)), Token("b", BBox(300, 100, 320, 112)))
    return Document("s", Page(512, 384), toks)


def test_scale_identity_and_stretch():
    doc = _doc()
    assert spatial_scale_augment(doc, factors=(1.0, 1.0)) is doc
    out = spatial_scale_augment(doc, factors=(1.25, 1.0))
    before = doc.tokens[1].bbox.center[0] - doc.tokens[0].bbox.center[0]
    after = out.tokens[1].bbox.center[0] - out.tokens[0].bbox.center[0]
    assert after == pytest.approx(1.25 * before)


def test_scale_augment_is_seeded():
    a = spatial_scale_augment(_doc(), np.random.default_rng(3))
    b = spatial_scale_augment(_doc(), np.random.default_rng(3))
    assert a == b
    with pytest.raises(ValueError):
        spatial_scale_augment(_doc())
