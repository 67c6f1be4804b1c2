from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilt.layout import (
    BBox,
    DatasetError,
    Document,
    Page,
    TaskInstance,
    Token,
    document_to_json,
    grid_for_count,
    image_anchor_tokens,
    load_dataset,
    quantize_boxes,
    quantize_centers,
    rasterize,
    read_raster,
    render_plaintext,
    rescale_document,
    save_dataset,
    write_pgm,
)


def write_lines(path, objs):
    path.write_text("\n".join(json.dumps(o) for o in objs) + "\n")


def test_minimal_line(tmp_path):
    f = tmp_path / "d.jsonl"
    write_lines(f, [{"id": "a", "page": {"width": 512, "height": 384}, "tokens": [{"text": "hi", "bbox": [0, 0, 16, 12]}]}])
    (doc,) = list(load_dataset(f))
    assert doc.words == ["hi"]
    assert doc.page.image is None


def test_pgm_image_is_loaded(tmp_path):
    img = np.ones((384, 512), dtype=np.float32)
    img[10:20, 30:40] = 0.0
    write_pgm(tmp_path / "p.pgm", img)
    f = tmp_path / "d.jsonl"
    write_lines(
        f,
        [{"id": "a", "page": {"width": 512, "height": 384, "image_path": "p.pgm"}, "tokens": [{"text": "x", "bbox": [30, 10, 40, 20]}]}],
    )
    (doc,) = list(load_dataset(f))
    assert doc.page.image.shape == (384, 512)
    assert doc.page.image[15, 35] == 0.0 and doc.page.image[0, 0] == 1.0


def test_raster_dimension_mismatch_is_an_error(tmp_path):
    write_pgm(tmp_path / "p.pgm", np.ones((100, 100), dtype=np.float32))
    f = tmp_path / "d.jsonl"
    write_lines(f, [{"id": "a", "page": {"width": 512, "height": 384, "image_path": "p.pgm"}, "tokens": []}])
    with pytest.raises(DatasetError):
        list(load_dataset(f))


def test_inverted_bbox_names_token_and_line(tmp_path):
    f = tmp_path / "d.jsonl"
    good = {"id": "a", "page": {"width": 512, "height": 384}, "tokens": []}
    bad = {"id": "b", "page": {"width": 512, "height": 384}, "tokens": [{"text": "oops", "bbox": [50, 0, 10, 12]}]}
    write_lines(f, [good, bad])
    with pytest.raises(DatasetError, match=r"d\.jsonl:2: token 0 \('oops'\)"):
        list(load_dataset(f))


def test_inverted_bbox_direct():
    with pytest.raises(ValueError):
        BBox(10, 0, 5, 5)


def test_dataset_roundtrip(tmp_path):
    tokens = (Token("Total", BBox(8, 12, 48, 24)), Token("5.00", BBox(64, 12, 96, 24)))
    doc = Document(
        "r",
        Page(512, 384, rasterize(512, 384, tokens)),
        tokens,
        (TaskInstance("qa", "total?", ("5.00",)), TaskInstance("kie", "TOTAL", ("5.00",))),
    )
    save_dataset([doc], tmp_path / "out.jsonl")
    (back,) = list(load_dataset(tmp_path / "out.jsonl"))
    assert back == doc
    save_dataset([back], tmp_path / "again.jsonl")
    (again,) = list(load_dataset(tmp_path / "again.jsonl"))
    assert again == back
    assert document_to_json(again)["tokens"] == document_to_json(doc)["tokens"]


def test_ppm_is_read_as_gray(tmp_path):
    from PIL import Image

    rgb = np.zeros((4, 6, 3), dtype=np.uint8)
    rgb[:, :3] = 255
    Image.fromarray(rgb).save(tmp_path / "c.ppm")
    gray = read_raster(tmp_path / "c.ppm")
    assert gray.shape == (4, 6)
    assert gray[0, 0] == 1.0 and gray[0, 5] == 0.0


# -- plaintext rendering ----------------------------------------------------


def test_render_two_words_one_row():
    doc = render_plaintext("a b", 512, 384, 8, 12)
    a, b = doc.tokens
    assert (a.bbox.x1 - a.bbox.x0, b.bbox.x1 - b.bbox.x0) == (8, 8)
    assert (a.bbox.y0, a.bbox.y1) == (b.bbox.y0, b.bbox.y1) == (0, 12)


def test_render_empty():
    assert render_plaintext("").tokens == ()


def test_render_wraps_third_word():
    # 5 columns: "ab cd" fills the first row exactly
    doc = render_plaintext("ab cd ef", 40, 36, 8, 12)
    assert [t.bbox.y0 for t in doc.tokens] == [0, 0, 12]


def test_render_hard_wrap_warns():
    doc = render_plaintext("abcdefghij x", 40, 60, 8, 12)
    assert doc.tokens[0].bbox.y1 - doc.tokens[0].bbox.y0 == 24
    assert doc.warnings and "hard-wrap" in doc.warnings[0]


def test_render_overflow_raises():
    with pytest.raises(ValueError):
        render_plaintext("a b c d", 8, 12, 8, 12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(alphabet="abcXYZ019.", min_size=1, max_size=9), max_size=30))
def test_render_token_count_matches_words(words):
    text = " ".join(words)
    doc = render_plaintext(text, with_image=False)
    assert len(doc.tokens) == len(text.split())


# -- anchors and quantisation ------------------------------------------------


def test_sixteen_anchors_tile_the_canonical_page():
    anchors = image_anchor_tokens(Page(512, 384), 16)
    assert len(anchors) == 16
    assert {(a.bbox.x1 - a.bbox.x0, a.bbox.y1 - a.bbox.y0) for a in anchors} == {(128, 96)}
    assert sum(a.bbox.area for a in anchors) == 512 * 384
    for i, a in enumerate(anchors):
        for b in anchors[i + 1 :]:
            ox = min(a.bbox.x1, b.bbox.x1) - max(a.bbox.x0, b.bbox.x0)
            oy = min(a.bbox.y1, b.bbox.y1) - max(a.bbox.y0, b.bbox.y0)
            assert ox <= 0 or oy <= 0


def test_single_anchor_is_the_page():
    (a,) = image_anchor_tokens(Page(300, 200), 1)
    assert a.bbox == BBox(0, 0, 300, 200)
    assert a.kind == "image_anchor" and a.text == ""


def test_anchor_counts():
    assert grid_for_count(12) == (4, 3)
    with pytest.raises(ValueError):
        grid_for_count(7)
    with pytest.raises(ValueError):
        grid_for_count(0)


def test_quantize_examples():
    page = Page(512, 384)
    doc = Document("q", page, (Token("c", BBox(250, 186, 262, 198)), Token("o", BBox(0, 0, 2, 2))))
    assert quantize_centers(doc) == [(32, 24), (0, 0)]
    big = quantize_boxes(np.array([[500, 0, 524, 10]]), 1024, 768)
    assert big[0, 0] == 32


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0, 500), st.floats(0, 370), st.floats(0, 12), st.floats(0, 14)), min_size=1, max_size=8),
    st.sampled_from([1, 2, 4, 8]),  # exact in binary floating point
)
def test_quantize_scale_invariant(boxes, k):
    arr = np.array([[x, y, x + w, y + h] for x, y, w, h in boxes])
    assert np.array_equal(quantize_boxes(arr, 512, 384), quantize_boxes(arr * k, 512 * k, 384 * k))


def test_rescale_document_maps_boxes_and_raster():
    tokens = (Token("x", BBox(100, 50, 200, 100)),)
    doc = Document("s", Page(1024, 768, np.ones((768, 1024), np.float32)), tokens)
    out = rescale_document(doc)
    assert out.page.image.shape == (384, 512)
    assert out.tokens[0].bbox == BBox(50, 25, 100, 50)
    assert quantize_centers(out) == quantize_centers(doc)
