import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from aptm.attributes import Vocab
from aptm.datapipe import (
    ClientError,
    CorruptImage,
    HttpPoseClient,
    ManifestError,
    ManifestRecord,
    StubCaptionClient,
    StubPoseClient,
    filter_filesize,
    filter_grayscale,
    grayscale_statistic,
    hflip,
    keypoint_box,
    load_dataset,
    load_manifest,
    prepare_input,
    recrop,
    run_filters,
    save_manifest,
)
from aptm.numcore import RngStream

# sRGB values of the 24-patch ColorChecker chart, row-major
COLOR_CHART = [
    (115, 82, 68), (194, 150, 130), (98, 122, 157), (87, 108, 67), (133, 128, 177), (103, 189, 170),
    (214, 126, 44), (80, 91, 166), (193, 90, 99), (94, 60, 108), (157, 188, 64), (224, 163, 46),
    (56, 61, 150), (70, 148, 73), (175, 54, 60), (231, 199, 31), (187, 86, 149), (8, 133, 161),
    (243, 243, 242), (200, 200, 200), (160, 160, 160), (122, 122, 121), (85, 85, 85), (52, 52, 52),
]


def color_chart(patch=20) -> np.ndarray:
    rows = [np.concatenate([np.full((patch, patch, 3), COLOR_CHART[r * 6 + c], np.uint8) for c in range(6)], 1)
            for r in range(4)]
    return np.concatenate(rows, 0)


def noisy(h, w, rng, gray=False):
    x = rng.integers(0, 256, size=(h, w, 1 if gray else 3), dtype=np.uint8)
    return np.repeat(x, 3, axis=2) if gray else x


def write_png(path, pixels):
    Image.fromarray(pixels).save(path)
    return path


# -- filters ----------------------------------------------------------------

def test_filesize_boundaries(tmp_path):
    small = tmp_path / "small.bin"
    small.write_bytes(b"x" * 10_000)
    exact = tmp_path / "exact.bin"
    exact.write_bytes(b"x" * 24_000)
    assert not filter_filesize(small)
    assert filter_filesize(exact)
    assert filter_filesize(small, threshold=0)
    assert not filter_filesize(tmp_path / "missing.bin")


def test_grayscale_equal_channels_dropped():
    x = noisy(50, 30, np.random.default_rng(0), gray=True)
    assert grayscale_statistic(x) == 0.0
    assert not filter_grayscale(x)


def test_grayscale_statistic_hand_value():
    # one pixel (255, 0, 0): diffs (255, 0, -255), variance 2*255^2/3
    assert grayscale_statistic(np.array([[[255, 0, 0]]])) == pytest.approx(2 * 255 ** 2 / 3)


def test_grayscale_keeps_color_chart_and_pure_colors():
    chart = color_chart()
    # direct computation on the fixture, one patch at a time
    per_patch = [np.var([r - g, g - b, b - r]) for r, g, b in COLOR_CHART]
    assert grayscale_statistic(chart) == pytest.approx(np.mean(per_patch))
    assert filter_grayscale(chart)
    assert filter_grayscale(np.tile(np.array([0, 0, 255], np.uint8), (8, 8, 1)))


def test_grayscale_non_three_channel_dropped():
    assert not filter_grayscale(np.zeros((4, 4)))
    assert not filter_grayscale(np.zeros((4, 4, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_grayscale_flip_invariant(seed):
    x = noisy(6, 5, np.random.default_rng(seed))
    assert grayscale_statistic(x) == pytest.approx(grayscale_statistic(x[:, ::-1]))


# -- manifest and pipeline --------------------------------------------------

@pytest.fixture
def corpus(tmp_path):
    rng = np.random.default_rng(1)
    files = {
        "good.png": noisy(120, 100, rng),
        "gray.png": noisy(120, 100, rng, gray=True),
        "tiny.png": noisy(8, 8, rng),
        "chart.png": np.clip(np.kron(color_chart(), np.ones((2, 2, 1), np.uint8)).astype(int)
                             + rng.integers(-3, 4, size=(160, 240, 3)), 0, 255).astype(np.uint8),
    }
    for name, px in files.items():
        write_png(tmp_path / name, px)
    assert os.path.getsize(tmp_path / "gray.png") >= 24_000
    (tmp_path / "broken.png").write_bytes(b"\x89PNG not really" * 3000)
    records = [ManifestRecord(n, f"caption {n}", i, provenance="synthetic")
               for i, n in enumerate(["good.png", "gray.png", "tiny.png", "chart.png", "broken.png"])]
    save_manifest(records, tmp_path / "manifest.jsonl")
    return tmp_path, records


def test_manifest_round_trip(corpus):
    root, records = corpus
    again = load_manifest(root / "manifest.jsonl")
    assert [r.to_json() for r in again] == [r.to_json() for r in records]


def test_manifest_missing_image(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"image": "nope.png", "caption": "x"}) + "\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_attribute_columns_all_or_nothing():
    with pytest.raises(ManifestError):
        ManifestRecord("a.png", "x", attributes=[0, 1])
    r = ManifestRecord("a.png", "x", attributes=[None] * 27)
    assert r.attributes == [-1] * 27


def test_pipeline_attribution_and_idempotence(corpus):
    root, records = corpus
    kept, report = run_filters(records, root)
    assert [r.image for r in kept] == ["good.png", "chart.png"]
    assert report.dropped == {"grayscale": 1, "filesize": 1, "unreadable": 1}
    assert report.total == report.kept + sum(report.dropped.values())
    again, report2 = run_filters(kept, root)
    assert again == kept and sum(report2.dropped.values()) == 0


def test_pipeline_parallel_matches_serial(corpus):
    root, records = corpus
    a, ra = run_filters(records, root)
    b, rb = run_filters(records, root, workers=4)
    assert a == b and ra.to_dict() == rb.to_dict()


def test_pipeline_person_count_rules(corpus):
    root, records = corpus
    person = [[10, 10, 1.0], [50, 90, 1.0]]
    stub = StubPoseClient({"good.png": [person, person], "chart.png": []})
    kept, report = run_filters(records, root, pose_client=stub)
    assert kept == []
    assert report.dropped["multiple_persons"] == 1 and report.dropped["no_person"] == 1


# -- clients and recrop -----------------------------------------------------

def test_recrop_full_frame_stub(corpus):
    root, _ = corpus
    im, why = recrop(root / "good.png", StubPoseClient())
    assert why is None and im.size == (100, 120)


def test_recrop_tight_box_with_margin(corpus):
    root, _ = corpus
    stub = StubPoseClient({"good.png": [[[20, 30, 0.9], [39, 69, 0.8], [0, 0, 0.0]]]})
    im, why = recrop(root / "good.png", stub)
    # box 20..40 x 30..70, grown by 10% of (20, 40) on each side
    assert why is None and im.size == (24, 48)


@pytest.mark.parametrize("people,reason", [([], "no_person"), ([[[1, 1, 1]], [[5, 5, 1]]], "multiple_persons")])
def test_recrop_drops(corpus, people, reason):
    root, _ = corpus
    assert recrop(root / "good.png", StubPoseClient({"good.png": people})) == (None, reason)


def test_recrop_client_failure(corpus):
    root, _ = corpus
    stub = StubPoseClient({"good.png": ClientError("timeout")})
    assert recrop(root / "good.png", stub) == (None, "pose_error")


def test_keypoint_box_clipped():
    assert keypoint_box(np.array([[0, 0, 1], [9, 9, 1]]), 10, 10) == (0, 0, 10, 10)
    assert keypoint_box(np.array([[0, 0, 0.0]]), 10, 10) is None


def test_http_client_retries_then_fails(monkeypatch):
    monkeypatch.setenv("APTM_POSE_URL", "http://127.0.0.1:9/pose")
    client = HttpPoseClient(timeout=0.2, retries=1)
    assert client.url == "http://127.0.0.1:9/pose"
    with pytest.raises(ClientError):
        client.detect("x.png")


def test_http_client_requires_endpoint(monkeypatch):
    monkeypatch.delenv("APTM_POSE_URL", raising=False)
    with pytest.raises(ClientError):
        HttpPoseClient()


def test_caption_stub_echoes():
    assert StubCaptionClient().calibrate("a.png", "a man in red") == "a man in red"


# -- input preparation ------------------------------------------------------

def test_prepare_input_shape_and_range(corpus):
    root, records = corpus
    vocab = Vocab.build(["caption"])
    for rec in records[:4]:
        x, ids = prepare_input(rec, root, vocab)
        assert x.shape == (3, 384, 128) and len(ids) == 56
        assert x.min() >= -1.0 and x.max() <= 1.0


def test_prepare_input_eval_deterministic_and_train_flip(corpus):
    root, records = corpus
    vocab = Vocab.build(["caption"])
    a, _ = prepare_input(records[0], root, vocab)
    b, _ = prepare_input(records[0], root, vocab)
    assert np.array_equal(a, b)
    stream = RngStream.named(0, "flip")
    flips = 0
    for step in range(40):
        x, _ = prepare_input(records[0], root, vocab, train=True, flip_stream=stream, counter=(step,))
        flipped = np.array_equal(x, hflip(a))
        assert flipped or np.array_equal(x, a)
        flips += flipped
    assert 5 < flips < 35
    np.testing.assert_array_equal(hflip(hflip(a)), a)


def test_corrupt_image_skipped(corpus):
    root, records = corpus
    vocab = Vocab.build(["caption"])
    with pytest.raises(CorruptImage):
        prepare_input(records[4], root, vocab)
    pixels, ids, attrs, kept = load_dataset(records, root, vocab, size=(32, 16))
    assert len(kept) == 4 and pixels.shape == (4, 3, 32, 16) and attrs.shape == (4, 27)
