import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avdnet.detection import (
    AnchorSet,
    Detection,
    decode,
    format_detection,
    kmeans_anchors,
    kmeans_objective,
    nms,
    read_detections,
    shape_iou,
    write_detections,
)
from avdnet.evaluation import GroundTruthBox, iou
from avdnet.training import assign_targets, encode_box

ANCHORS = AnchorSet([(0.1, 0.1), (0.05, 0.12), (0.2, 0.08), (0.3, 0.3)])


# ---------------------------------------------------------------- decode


def test_decode_zero_logits():
    raw = np.zeros((4 * 7, 5, 5))
    dets = decode(raw, ANCHORS, 0.0, num_classes=2)
    assert len(dets) == 4 * 25  # at most four per cell
    first = dets[0]
    assert first.score == pytest.approx(0.25)
    assert first.box[:2] == pytest.approx((0.5 / 5, 0.5 / 5))
    assert first.box[2:] == pytest.approx(tuple(ANCHORS.sizes[0]))


def test_decode_threshold_one_is_empty():
    raw = np.random.default_rng(0).normal(0, 30, (4 * 7, 3, 3))
    raw[4::7] = 1e3
    assert decode(raw, ANCHORS, 1.0) == []


def test_decode_channel_mismatch():
    with pytest.raises(ValueError):
        decode(np.zeros((27, 4, 4)), ANCHORS, num_classes=2)
    with pytest.raises(ValueError):
        decode(np.zeros((28, 4, 4)), ANCHORS, num_classes=3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_decode_monotone_in_threshold(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    raw = np.random.default_rng(seed).normal(0, 2, (4 * 6, 4, 4))
    strict = decode(raw, ANCHORS, hi)
    loose = decode(raw, ANCHORS, lo)
    assert len(strict) <= len(loose)
    assert set(strict) <= set(loose)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    grid = 19
    for _ in range(2000):
        box = (rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.01, 1), rng.uniform(0.01, 1))
        a = int(rng.integers(len(ANCHORS)))
        row, col, (tx, ty, tw, th) = encode_box(box, ANCHORS.sizes[a], grid)
        raw = np.full((4 * 6, grid, grid), -50.0)
        raw[a * 6:a * 6 + 4, row, col] = (tx, ty, tw, th)
        raw[a * 6 + 4, row, col] = 50.0
        (d,) = decode(raw, ANCHORS, 0.5)
        assert np.allclose(d.box, box, atol=1e-6, rtol=0)


# ---------------------------------------------------------------- nms


def test_nms_examples():
    box = (0.5, 0.5, 0.2, 0.2)
    one = Detection(0, 0.9, box)
    assert nms([one]) == [one]
    assert nms([Detection(0, 0.8, box), one]) == [one]
    far = Detection(0, 0.8, (0.1, 0.1, 0.05, 0.05))
    assert nms([one, far]) == [one, far]


def test_nms_is_per_class():
    box = (0.5, 0.5, 0.2, 0.2)
    a, b = Detection(0, 0.9, box), Detection(1, 0.8, box)
    assert nms([a, b]) == [a, b]


def test_nms_ties_prefer_smaller_cx():
    a = Detection(0, 0.5, (0.40, 0.5, 0.2, 0.2))
    b = Detection(0, 0.5, (0.41, 0.5, 0.2, 0.2))
    assert nms([b, a]) == [a]


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 0.0)


det_strategy = st.builds(
    Detection,
    st.integers(0, 2),
    st.floats(0, 1),
    st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.02, 0.3), st.floats(0.02, 0.3)),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(det_strategy, max_size=30), st.floats(0.05, 1.0))
def test_nms_properties(dets, thresh):
    kept = nms(dets, thresh)
    assert all(k in dets for k in kept)
    for a, b in itertools.combinations(kept, 2):
        if a.class_id == b.class_id:
            assert iou(a.box, b.box) < thresh
    # every dropped box overlaps a kept, at-least-as-high-ranked box of its class
    for d in dets:
        if d not in kept:
            assert any(k.class_id == d.class_id and k.score >= d.score and iou(k.box, d.box) >= thresh
                       for k in kept)


# ---------------------------------------------------------------- k-means


def test_kmeans_identical_boxes():
    assert list(kmeans_anchors([(0.1, 0.2)] * 5, k=1)) == [(0.1, 0.2)]


def test_kmeans_two_shapes_recovered():
    boxes = [(0.1, 0.05)] * 7 + [(0.04, 0.3)] * 4
    anchors = kmeans_anchors(boxes, k=2, seed=3)
    # brute force over the two possible non-trivial partitions agrees
    assert sorted(anchors) == sorted([(0.1, 0.05), (0.04, 0.3)])


def test_kmeans_deterministic_and_sorted():
    rng = np.random.default_rng(0)
    boxes = rng.uniform(0.02, 0.3, (60, 2))
    a, b = kmeans_anchors(boxes, 4, seed=11), kmeans_anchors(boxes, 4, seed=11)
    assert a == b
    areas = a.sizes.prod(axis=1)
    assert np.all(np.diff(areas) >= 0)


def test_kmeans_errors():
    with pytest.raises(ValueError, match="at least"):
        kmeans_anchors([(0.1, 0.1)] * 3, k=4)
    with pytest.raises(ValueError, match="distinct"):
        kmeans_anchors([(0.1, 0.1)] * 3 + [(0.2, 0.2)] * 3, k=4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_kmeans_objective_never_increases(seed, k):
    rng = np.random.default_rng(seed)
    boxes = np.exp(rng.normal(np.log(0.08), 0.6, (40, 2)))
    history = []
    anchors = kmeans_anchors(boxes, k, seed=seed, history=history)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    assert kmeans_objective(boxes, anchors.sizes) <= history[0] + 1e-12


def test_shape_iou():
    assert shape_iou([(0.1, 0.2)], [(0.1, 0.2)])[0, 0] == 1.0
    assert shape_iou([(0.2, 0.1)], [(0.1, 0.1)])[0, 0] == pytest.approx(0.5)


# ---------------------------------------------------------------- files


def test_detection_file_round_trip(tmp_path):
    dets = [Detection(1, 0.5, (0.25, 0.125, 0.5, 0.0625)), Detection(0, 0.875, (1.1, -0.05, 0.2, 0.3))]
    path = tmp_path / "d.txt"
    write_detections(dets, path)
    assert path.read_text().splitlines()[0] == "1 0.500000 0.250000 0.125000 0.500000 0.062500"
    assert read_detections(path) == dets
    assert format_detection(dets[1]).split()[0] == "0"


def test_anchor_file_round_trip(tmp_path):
    path = tmp_path / "a.txt"
    ANCHORS.save(path)
    assert len(path.read_text().splitlines()) == 4
    assert np.allclose(AnchorSet.load(path).sizes, ANCHORS.sizes, atol=5e-7)


def test_anchor_validation():
    with pytest.raises(ValueError):
        AnchorSet([(0.1, 0.0)])


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(0, 1.5, (0.5, 0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        Detection(0, 0.5, (0.5, 0.5, 0.0, 0.1))


def test_assigned_targets_decode_back():
    gts = [GroundTruthBox(0, 0.31, 0.72, 0.1, 0.05), GroundTruthBox(1, 0.8, 0.2, 0.06, 0.2)]
    t = assign_targets(gts, ANCHORS, 19, 2)
    assert t.resp.sum() == 2
