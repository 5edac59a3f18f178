import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avdnet.dataio import (
    AnnotationError,
    ManifestError,
    SynthConfig,
    TruncatedImageError,
    UnsupportedFormatError,
    letterbox,
    load_dataset,
    load_manifest,
    load_pgm,
    load_ppm,
    parse_annotations,
    save_annotations,
    save_pgm,
    save_ppm,
    synth_scene,
    write_synth_dataset,
)
from avdnet.evaluation import GroundTruthBox


# ---------------------------------------------------------------- annotations


def test_parse_one_box(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 0.5 0.5 0.1 0.2\n")
    assert parse_annotations(p) == [GroundTruthBox(0, 0.5, 0.5, 0.1, 0.2)]


def test_parse_empty(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("")
    assert parse_annotations(p) == []


def test_range_error_names_field(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 1.5 0.5 0.1 0.1\n")
    with pytest.raises(AnnotationError, match="cx"):
        parse_annotations(p)


def test_malformed_line_number(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 0.5 0.5 0.1 0.1\n\n1 0.2 oops 0.1 0.1\n")
    with pytest.raises(AnnotationError, match=":3:"):
        parse_annotations(p)
    p.write_text("0 0.5 0.5 0.1\n")
    with pytest.raises(AnnotationError, match=":1:"):
        parse_annotations(p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 10**6), st.integers(0, 10**6),
                          st.integers(1, 10**6), st.integers(1, 10**6)), max_size=12))
def test_annotation_round_trip(tmp_path_factory, rows):
    boxes = [GroundTruthBox(c, a / 1e6, b / 1e6, w / 1e6, h / 1e6) for c, a, b, w, h in rows]
    p = tmp_path_factory.mktemp("ann") / "a.txt"
    save_annotations(boxes, p)
    assert parse_annotations(p) == boxes


# ---------------------------------------------------------------- images


def test_white_pixel(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    np.testing.assert_array_equal(load_ppm(p), np.ones((3, 1, 1)))


def test_ppm_round_trip_bit_identical(tmp_path):
    raw = np.random.default_rng(0).integers(0, 256, (3, 7, 11)).astype(np.uint8)
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    save_ppm(raw / 255.0, a)
    save_ppm(load_ppm(a), b)
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(np.rint(load_ppm(a) * 255).astype(np.uint8), raw)


def test_ppm_header_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([0, 0, 0, 255, 255, 255]))
    assert load_ppm(p).shape == (3, 1, 2)


def test_ppm_errors(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n1 1\n255\n255 255 255\n")
    with pytest.raises(UnsupportedFormatError, match="ASCII"):
        load_ppm(p)
    p.write_bytes(b"GIF89a")
    with pytest.raises(UnsupportedFormatError):
        load_ppm(p)
    p.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(TruncatedImageError):
        load_ppm(p)
    assert not issubclass(TruncatedImageError, UnsupportedFormatError)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (5, 9)).astype(np.uint8)
    p = tmp_path / "g.pgm"
    save_pgm(img, p)
    assert p.read_bytes().startswith(b"P5\n9 5\n255\n")
    np.testing.assert_array_equal(load_pgm(p), img)


# ---------------------------------------------------------------- letterbox


def test_letterbox_square_is_pure_resize():
    img = np.random.default_rng(0).random((3, 50, 50)).astype(np.float32)
    canvas, tf = letterbox(img, 100)
    assert (tf.pad_x, tf.pad_y) == (0, 0) and tf.scale_x == tf.scale_y == 2.0
    assert canvas.shape == (3, 100, 100)


def test_letterbox_wide_image():
    img = np.zeros((3, 100, 200), np.float32)
    canvas, tf = letterbox(img, 608)
    assert tf.scale_x == pytest.approx(3.04) and tf.scale_y == pytest.approx(3.04)
    assert tf.pad_y == 152 and tf.pad_x == 0
    assert np.all(canvas[:, :152] == 0.5) and np.all(canvas[:, -152:] == 0.5)
    assert np.all(canvas[:, 152:-152] == 0.0)


@pytest.mark.parametrize("shape", [(100, 200), (37, 91), (120, 45), (64, 64)])
def test_letterbox_corners_round_trip(shape):
    h, w = shape
    _, tf = letterbox(np.zeros((3, h, w), np.float32), 152)
    for x, y in ((0, 0), (w, 0), (0, h), (w, h)):
        nx, ny = tf.point_to_network(x, y)
        bx, by = tf.point_to_original(nx, ny)
        assert abs(bx - x) <= 0.51 and abs(by - y) <= 0.51


def test_letterbox_box_round_trip():
    _, tf = letterbox(np.zeros((3, 90, 170), np.float32), 152)
    box = (40.0, 30.0, 20.0, 10.0)
    back = tf.box_to_original(tf.box_to_network(box))
    assert np.allclose(back, box, atol=1e-9)


def test_letterbox_target_too_small():
    with pytest.raises(ValueError):
        letterbox(np.zeros((3, 4, 4), np.float32), 4)


# ---------------------------------------------------------------- synthetic scenes


def test_synth_background_only():
    img, boxes = synth_scene(SynthConfig(count_range=(0, 0)), 0)
    assert boxes == [] and img.shape == (3, 152, 152)


def test_synth_deterministic():
    cfg = SynthConfig(seed=5)
    a, b = synth_scene(cfg, 3), synth_scene(cfg, 3)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    c = synth_scene(cfg, 4)
    assert not np.array_equal(a[0], c[0])


def test_synth_boxes_valid_over_many_scenes():
    cfg = SynthConfig(image_size=96, size_range=(4, 30), num_classes=4, seed=2)
    for i in range(1000):
        img, boxes = synth_scene(cfg, i)
        assert img.min() >= 0 and img.max() <= 1
        for b in boxes:
            x0, y0 = b.cx - b.w / 2, b.cy - b.h / 2
            assert x0 >= 0 and y0 >= 0 and x0 + b.w <= 1 + 1e-12 and b.cy + b.h / 2 <= 1 + 1e-12
            assert b.w * 96 >= 2 - 1e-9 and b.h * 96 >= 2 - 1e-9


def test_synth_errors():
    with pytest.raises(ValueError):
        synth_scene(SynthConfig(image_size=32, size_range=(10, 40)), 0)
    with pytest.raises(ValueError):
        SynthConfig(count_range=(3, 1))
    with pytest.raises(ValueError):
        SynthConfig(size_range=(1, 5))


def test_synth_classes_look_different():
    cfg = SynthConfig(count_range=(6, 6), num_classes=2, occlusion_prob=0, shadow_prob=0, seed=1)
    means = {0: [], 1: []}
    for i in range(10):
        img, boxes = synth_scene(cfg, i)
        for b in boxes:
            x0, y0 = int(round((b.cx - b.w / 2) * 152)), int(round((b.cy - b.h / 2) * 152))
            patch = img[:, y0:y0 + int(round(b.h * 152)), x0:x0 + int(round(b.w * 152))]
            means[b.class_id].append(patch.mean(axis=(1, 2)))
    red0 = np.mean([m[0] - m[2] for m in means[0]])
    red1 = np.mean([m[0] - m[2] for m in means[1]])
    assert red0 > red1 + 0.2


# ---------------------------------------------------------------- manifests


def test_manifest_round_trip(tmp_path):
    manifest = write_synth_dataset(SynthConfig(seed=0), 3, tmp_path / "ds")
    m = load_manifest(manifest)
    assert len(m) == 3 and [p.name for p in m.images] == [f"scene_0000{i}.ppm" for i in range(3)]
    assert m.class_names == ["class0", "class1"]
    items = load_dataset(m, 152)
    assert items[0][0].shape == (3, 152, 152)


def test_manifest_comments_and_relative_paths(tmp_path):
    write_synth_dataset(SynthConfig(seed=0), 2, tmp_path)
    (tmp_path / "m.txt").write_text("# header\nimages/scene_00001.ppm  # second\n\nimages/scene_00000.ppm\n")
    m = load_manifest(tmp_path / "m.txt")
    assert [p.name for p in m.images] == ["scene_00001.ppm", "scene_00000.ppm"]


def test_manifest_missing_entries_aggregated(tmp_path):
    write_synth_dataset(SynthConfig(seed=0), 2, tmp_path)
    (tmp_path / "images" / "scene_00000.txt").unlink()
    (tmp_path / "m.txt").write_text("images/scene_00000.ppm\nimages/scene_00001.ppm\nimages/nope.ppm\n")
    with pytest.raises(ManifestError) as err:
        load_manifest(tmp_path / "m.txt")
    msg = str(err.value)
    assert "scene_00000.txt" in msg and "nope.ppm" in msg and "nope.txt" in msg


def test_manifest_empty(tmp_path):
    (tmp_path / "m.txt").write_text("# nothing\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.txt")


def test_manifest_class_table_bound(tmp_path):
    write_synth_dataset(SynthConfig(seed=0, count_range=(4, 4)), 2, tmp_path)
    (tmp_path / "classes.txt").write_text("car\n")
    with pytest.raises(ManifestError, match="class id"):
        load_manifest(tmp_path / "train.txt")
