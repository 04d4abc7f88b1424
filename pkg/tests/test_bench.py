import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soe.bench import (COLOR_QUESTION, AnnotationRecord, BenchmarkItem, Manifest, MetricReport,
                       Serialized, StubEmbedder, StubVQA, build_manifest, build_prompts,
                       clip_score, cosine_score, crop_eval_region, fid_score, filter_candidates,
                       query_color, read_annotations, summarize, write_report)
from soe.errors import (AttributionError, ConfigError, DegenerateInputError, ServiceError,
                        UsageError)
from soe.masks import RectMask


def record(w, h, img=512, occluded=False, image_id="a", x=0, y=0, label="cat"):
    return AnnotationRecord(image_id, img, img, RectMask.from_xywh(x, y, w, h, img, img), label,
                            occluded)


def solid(rgb, size=8):
    return np.ones((3, size, size)) * np.asarray(rgb, dtype=float)[:, None, None]


class FixedEmbedder:
    def __init__(self, e_img, e_txt):
        self.e_img, self.e_txt = np.asarray(e_img, float), np.asarray(e_txt, float)

    def embed_image(self, image):
        return self.e_img

    def embed_text(self, text):
        return self.e_txt


# --- filter ---------------------------------------------------------------

def test_filter_keeps_80px_in_512():
    assert len(filter_candidates([record(80, 80)])) == 1


def test_filter_drops_60px_in_512():
    assert filter_candidates([record(60, 60)]) == []


def test_filter_drops_occluded():
    assert filter_candidates([record(80, 80, occluded=True)]) == []


def test_filter_bounds_are_open():
    # exactly 1/8 and exactly 1/6 of 96 px
    assert filter_candidates([record(12, 12, img=96), record(16, 16, img=96)]) == []
    assert len(filter_candidates([record(13, 5, img=96), record(5, 15, img=96)])) == 2


@settings(max_examples=200)
@given(st.integers(1, 200), st.integers(1, 200), st.booleans())
def test_filter_side_rule(w, h, occ):
    r = record(w, h, img=600, occluded=occ)
    frac = max(w, h) / 600
    kept = bool(filter_candidates([r]))
    assert kept == (not occ and 1 / 8 < frac < 1 / 6)
    if kept:
        assert w * h / 600 ** 2 < 0.03


# --- VQA ------------------------------------------------------------------

@pytest.mark.parametrize("rgb,name", [((1, 0, 0), "red"), ((0, 0, 1), "blue"),
                                      ((0, 0.8, 0.1), "green"), ((1, 1, 0.1), "yellow"),
                                      ((0.05, 0.05, 0.05), "black"), ((0.95, 0.95, 0.95), "white")])
def test_stub_vqa_colors(rgb, name):
    assert query_color(solid(rgb), StubVQA()) == name


def test_stub_vqa_takes_the_mode():
    img = solid((0, 0, 1))
    img[:, :2] = np.array([1.0, 0, 0])[:, None, None]
    assert query_color(img, StubVQA()) == "blue"


class Recorder:
    def __init__(self, reply):
        self.reply, self.questions = reply, []

    def answer(self, image, question):
        self.questions.append(question)
        if isinstance(self.reply, Exception):
            raise self.reply
        return self.reply


def test_query_sends_exact_question_and_lowercases():
    client = Recorder("  Brown ")
    assert query_color(solid((0.5, 0.3, 0.1)), client) == "brown"
    assert client.questions == ["What is the primary color of the object in this area?"]
    assert COLOR_QUESTION == client.questions[0]


def test_query_empty_answer():
    with pytest.raises(AttributionError):
        query_color(solid((1, 0, 0)), Recorder(""))


def test_query_client_failure():
    with pytest.raises(ServiceError, match="timed out"):
        query_color(solid((1, 0, 0)), Recorder(TimeoutError("timed out")))


def test_query_empty_crop():
    with pytest.raises(UsageError):
        query_color(np.zeros((3, 0, 4)), StubVQA())


# --- prompts and crops ----------------------------------------------------

@pytest.mark.parametrize("label,color,expect", [
    ("dog", "brown", ("a dog", "a brown dog")),
    ("cat", "black", ("a cat", "a black cat")),
    ("traffic light", "red", ("a traffic light", "a red traffic light")),
])
def test_build_prompts(label, color, expect):
    assert build_prompts(label, color) == expect


def test_build_prompts_needs_label():
    with pytest.raises(UsageError):
        build_prompts(" ", "red")


def _coords(size=512):
    yy, xx = np.mgrid[:size, :size]
    return np.stack([xx, yy, np.zeros_like(xx)]).astype(float)


def test_crop_interior():
    crop = crop_eval_region(_coords(), RectMask(256, 256, 40, 40, 512, 512))
    assert crop.shape == (3, 80, 80)
    assert crop[0, 0, 0] == 216 and crop[1, 0, 0] == 216


def test_crop_corner_is_clamped():
    crop = crop_eval_region(_coords(), RectMask(20, 20, 40, 40, 512, 512))
    assert crop.shape == (3, 80, 80)
    assert crop[0, 0, 0] == 0 and crop[1, 0, 0] == 0
    crop = crop_eval_region(_coords(), RectMask(500, 490, 24, 40, 512, 512))
    assert crop.shape == (3, 80, 80) and crop[0, -1, -1] == 511 and crop[1, -1, -1] == 511


# --- scores ---------------------------------------------------------------

def test_clip_score_examples():
    assert clip_score(solid((1, 0, 0)), "x", FixedEmbedder([1, 2], [1, 2])) == pytest.approx(100)
    assert clip_score(solid((1, 0, 0)), "x", FixedEmbedder([1, 0], [0, 1])) == 0
    assert clip_score(solid((1, 0, 0)), "x", FixedEmbedder([0.6, 0.8], [1, 0])) == pytest.approx(60)
    assert clip_score(solid((1, 0, 0)), "x", FixedEmbedder([-1, 0], [1, 0])) == 0


def test_clip_score_width_mismatch():
    with pytest.raises(ConfigError):
        clip_score(solid((1, 0, 0)), "x", FixedEmbedder([1, 0, 0], [1, 0]))


def test_clip_score_embedder_failure():
    class Broken:
        def embed_image(self, image):
            raise RuntimeError("down")

        def embed_text(self, text):
            return np.ones(2)

    with pytest.raises(ServiceError):
        clip_score(solid((1, 0, 0)), "x", Broken())


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_cosine_score_range(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    assert 0 <= cosine_score(a, b) <= 100


def test_stub_embedder_is_deterministic_unit_norm():
    e = StubEmbedder()
    img = np.random.default_rng(0).random((3, 20, 20))
    assert np.array_equal(e.embed_image(img), StubEmbedder().embed_image(img))
    assert np.linalg.norm(e.embed_text("a red apple")) == pytest.approx(1)
    assert 0 <= clip_score(img, "a red apple", e) <= 100


def test_fid_identical_sets():
    x = np.random.default_rng(0).standard_normal((200, 4))
    assert fid_score(x, x) < 1e-8


def test_fid_1d_mean_shift():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((100_000, 1))
    b = rng.standard_normal((100_000, 1)) + 1
    assert fid_score(a, b) == pytest.approx(1.0, rel=0.05)


def test_fid_is_symmetric():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((300, 5))
    b = rng.standard_normal((400, 5)) @ rng.standard_normal((5, 5)) + 0.3
    assert abs(fid_score(a, b) - fid_score(b, a)) < 1e-9


def test_fid_closed_form_gaussians():
    # known covariances: diag(1) vs diag(4) gives (1-2)^2 per dimension
    rng = np.random.default_rng(3)
    a = rng.standard_normal((200_000, 2))
    b = 2 * rng.standard_normal((200_000, 2))
    assert fid_score(a, b) == pytest.approx(2.0, rel=0.05)


def test_fid_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        fid_score(np.zeros((3, 4)), np.zeros((3, 4)))


# --- manifests ------------------------------------------------------------

def _corpus(n_valid, n_big, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for k in range(n_valid):
        s = int(rng.integers(65, 85))
        recs.append(record(s, s, image_id=f"im{k % 4}", x=int(rng.integers(0, 400)),
                           y=int(rng.integers(0, 400))))
    for k in range(n_big):
        recs.append(record(200, 150, image_id=f"big{k}"))
    return recs


def _loader(r):
    return solid((0.9, 0.1, 0.1), r.img_w)


def test_manifest_empty():
    m = build_manifest([], StubVQA(), "empty", _loader)
    assert len(m) == 0 and m.split == "empty"


def test_manifest_counts_and_order():
    recs = _corpus(10, 5)
    m = build_manifest(recs[::-1], StubVQA(), "s", _loader)
    assert len(m) == 10
    keys = [(i.item_id.split(":")[0], i.mask.x0, i.mask.y0) for i in m.items]
    assert keys == sorted(keys)
    assert all(i.color == "red" and i.prompt_color == "a red cat" for i in m.items)


def test_manifest_rejects_duplicate_ids():
    item = BenchmarkItem("x", "x.ppm", RectMask(100, 100, 80, 80, 512, 512), "cat", "red",
                         "a cat", "a red cat")
    with pytest.raises(UsageError):
        Manifest("s", [item, item])
    with pytest.raises(UsageError):
        build_manifest([record(80, 80), record(80, 80)], StubVQA(), "s", _loader)


def test_manifest_file_is_deterministic(tmp_path):
    recs = _corpus(12, 3, seed=4)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    build_manifest(recs, StubVQA(), "s", _loader).write(a)
    build_manifest(recs[::-1], StubVQA(), "s", _loader, workers=4).write(b)
    assert a.read_bytes() == b.read_bytes()
    assert b"\r" not in a.read_bytes()
    first = json.loads(a.read_text().splitlines()[0])
    assert list(first) == ["item_id", "image", "mask", "label", "color", "prompt_label",
                           "prompt_color"]
    assert list(first["mask"]) == ["cx", "cy", "w", "h", "img_w", "img_h"]
    back = Manifest.read(a)
    assert [i.item_id for i in back.items] == [json.loads(s)["item_id"]
                                               for s in a.read_text().splitlines()]


def test_manifest_errors_carry_item_context():
    with pytest.raises(AttributionError, match="a:0,0,80,80"):
        build_manifest([record(80, 80)], Recorder(""), "s", _loader)


def test_serialized_adapter_forwards():
    client = Serialized(Recorder("Red"))
    assert query_color(solid((1, 0, 0)), client) == "red"


def test_read_annotations(tmp_path):
    p = tmp_path / "ann.jsonl"
    p.write_text(json.dumps({"image_id": 7, "width": 512, "height": 512, "bbox": [10, 20, 80, 70],
                             "category": "dog", "occluded": True}) + "\n\n")
    (r,) = read_annotations(p)
    assert (r.image_id, r.bbox.cx, r.bbox.cy, r.occluded, r.image) == ("7", 50, 55, True, "7")
    p.write_text('{"image_id": 1}\n')
    with pytest.raises(UsageError):
        read_annotations(p)


# --- reports --------------------------------------------------------------

def test_report_layout():
    feats = [np.random.default_rng(k).random(6) for k in range(8)]
    rows = [summarize("s", "label", "baseline", [10.0, 20.0], feats[:2], feats[:2]),
            summarize("s", "label", "guided", [], [], []),
            summarize("s", "color", "guided", [5.0] * 8, feats, feats[::-1])]
    text = write_report(rows)
    lines = text.splitlines()
    assert lines[0] == "split,prompt_kind,method,clip_score,fid,n"
    assert lines[1] == "s,label,baseline,15.000000,,2"
    assert lines[2] == "s,label,guided,,,0"
    assert lines[3].startswith("s,color,guided,5.000000,0.") and lines[3].endswith(",8")


def test_metric_report_invariants():
    with pytest.raises(Exception):
        MetricReport("s", "label", "guided", 120.0, 1.0, 3)
    with pytest.raises(Exception):
        MetricReport("s", "label", "guided", 50.0, -1.0, 3)
