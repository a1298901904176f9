"""Synthetic scenes, netpbm I/O, confusion-matrix mIoU and the speed benchmark."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfanet.data import (
    ConfusionMatrix,
    NetpbmError,
    SceneSet,
    SceneSpec,
    Shape,
    UnfoldedModelError,
    bench_fps,
    channel_mean,
    encode_pgm,
    encode_ppm,
    generate_scene,
    miou,
    read_manifest,
    read_pgm,
    read_ppm,
    render,
    shape_mask,
    split_bounds,
    write_dataset,
    write_pgm,
    write_ppm,
)
from sfanet.network import SfanetConfig, SfanetModel, fold_batch_norm
from sfanet.ops import IGNORE_INDEX

# ---------------------------------------------------------------------------
# scene generator


def test_zero_shapes_give_background_only():
    spec = SceneSpec(height=16, width=24, shapes_per_image=(0, 0))
    image, labels = generate_scene(spec, 3)
    assert image.shape == (16, 24, 3) and image.dtype == np.uint8
    assert labels.shape == (16, 24) and not labels.any()


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_scene_generation_is_deterministic(index):
    spec = SceneSpec(height=32, width=32, seed=11)
    a, b = generate_scene(spec, index), generate_scene(spec, index)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_different_indices_differ():
    spec = SceneSpec(height=32, width=32)
    assert not np.array_equal(generate_scene(spec, 0)[0], generate_scene(spec, 1)[0])


def test_full_coverage_disk_labels_every_pixel():
    spec = SceneSpec(height=10, width=10, noise=0.0)
    disk = Shape("disk", 2, (5.0, 5.0), (100.0, 100.0), (1.0, 2.0, 3.0))
    image, labels = render(spec, [disk], np.random.default_rng(0))
    assert (labels == 2).all()
    assert (image == np.array([1, 2, 3], np.uint8)).all()


def test_shape_kinds_cover_expected_pixels():
    rect = Shape("rectangle", 1, (4.0, 4.0), (4.0, 2.0), (0, 0, 0))
    assert shape_mask(rect, 8, 8).sum() == 4 * 2
    tri = Shape("triangle", 3, (4.0, 4.0), (8.0, 8.0), (0, 0, 0))
    m = shape_mask(tri, 8, 8)
    assert m[-1].sum() > m[0].sum()  # apex on top, base at the bottom
    flipped = shape_mask(Shape("triangle", 3, (4.0, 4.0), (8.0, 8.0), (0, 0, 0), flip=True), 8, 8)
    np.testing.assert_array_equal(flipped, m[::-1])


def test_labels_stay_in_class_range():
    spec = SceneSpec(height=32, width=32, num_classes=4)
    for i in range(20):
        assert generate_scene(spec, i)[1].max() < 4


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(num_classes=3)  # three shape kinds need four classes
    with pytest.raises(ValueError):
        SceneSpec(num_classes=2, shape_kinds=("hexagon",))
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(), -1)


def test_split_bounds_and_channel_mean():
    assert split_bounds(10, 3) == {"train": (0, 7), "val": (7, 10)}
    with pytest.raises(ValueError):
        split_bounds(5, 6)
    spec = SceneSpec(height=8, width=8)
    data = SceneSet(spec, range(3))
    expected = np.stack([data[i][0] for i in range(3)]).reshape(-1, 3).mean(axis=0)
    np.testing.assert_allclose(channel_mean(data), expected, rtol=1e-12)


def test_written_dataset_reads_back(tmp_path):
    spec = SceneSpec(height=8, width=8)
    manifest = write_dataset(tmp_path, spec, 5, 2)
    assert manifest == read_manifest(tmp_path)
    assert len(manifest["files"]) == 5
    img, lab = generate_scene(spec, 4)
    np.testing.assert_array_equal(read_ppm(tmp_path / manifest["files"][4]["image"]), img)
    np.testing.assert_array_equal(read_pgm(tmp_path / manifest["files"][4]["mask"]), lab)


# ---------------------------------------------------------------------------
# netpbm


def test_ppm_byte_oracle():
    image = np.array([[[255, 0, 0], [0, 0, 255]]], dtype=np.uint8)
    assert encode_ppm(image) == b"P6\n2 1\n255\n" + bytes([0xFF, 0, 0, 0, 0, 0xFF])


def test_pgm_byte_oracle():
    assert encode_pgm(np.array([[0, 7], [255, 1]], np.uint8)) == b"P5\n2 2\n255\n\x00\x07\xff\x01"


@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**16))
@settings(max_examples=25)
def test_netpbm_round_trip(h, w, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    d = tmp_path_factory.mktemp("pbm")
    img = rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)
    mask = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
    write_ppm(d / "a.ppm", img)
    write_pgm(d / "a.pgm", mask)
    np.testing.assert_array_equal(read_ppm(d / "a.ppm"), img)
    np.testing.assert_array_equal(read_pgm(d / "a.pgm"), mask)


def test_netpbm_header_comments_accepted(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x03\x04")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[3, 4]])


@pytest.mark.parametrize(
    "payload",
    [b"P6\n2 1\n255\n\x00", b"P5\n2 1\n65535\n\x00\x00\x00\x00", b"P3\n1 1\n255\n0 0 0", b"P5\n0 1\n255\n"],
)
def test_netpbm_rejects_malformed(tmp_path, payload):
    path = tmp_path / "bad"
    path.write_bytes(payload)
    reader = read_ppm if payload.startswith((b"P6", b"P3")) else read_pgm
    with pytest.raises(NetpbmError):
        reader(path)


def test_encoders_validate_input():
    with pytest.raises(ValueError):
        encode_ppm(np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        encode_ppm(np.zeros((2, 2, 3), np.float32))
    with pytest.raises(ValueError):
        encode_pgm(np.full((2, 2), 300))


# ---------------------------------------------------------------------------
# mIoU


def brute_force_miou(pred, gt, n):
    ious = []
    valid = gt != IGNORE_INDEX
    for c in range(n):
        p = set(np.flatnonzero((pred == c) & valid))
        g = set(np.flatnonzero((gt == c) & valid))
        union = p | g
        if union:
            ious.append(len(p & g) / len(union))
    return sum(ious) / len(ious)


def test_miou_hand_example():
    cm = ConfusionMatrix(2).update([0, 0, 1, 1], [0, 1, 1, 1])
    np.testing.assert_allclose(cm.class_iou(), [1 / 2, 2 / 3])
    assert miou(cm) == pytest.approx(0.5833, abs=5e-5)
    assert miou(cm) == (1 / 2 + 2 / 3) / 2


def test_miou_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        gt = rng.integers(0, 5, size=(16, 16))
        gt[rng.random(gt.shape) < 0.1] = IGNORE_INDEX
        pred = rng.integers(0, 5, size=(16, 16))
        cm = ConfusionMatrix(5).update(pred, gt)
        assert miou(cm) == brute_force_miou(pred.ravel(), gt.ravel(), 5)


def test_absent_classes_are_excluded():
    cm = ConfusionMatrix(4).update([0, 1], [0, 1])
    assert np.isnan(cm.class_iou()[2:]).all()
    assert miou(cm) == 1.0


def test_all_ignore_raises():
    cm = ConfusionMatrix(3).update([0, 1], [IGNORE_INDEX, IGNORE_INDEX])
    with pytest.raises(ValueError, match="empty"):
        miou(cm)


def test_confusion_matrix_merge_and_range_checks():
    a = ConfusionMatrix(3).update([0, 1], [0, 2])
    b = ConfusionMatrix(3).update([2], [2])
    assert (a + b).total == 3
    with pytest.raises(ValueError):
        ConfusionMatrix(3).update([3], [0])
    with pytest.raises(ValueError):
        a + ConfusionMatrix(4)


# ---------------------------------------------------------------------------
# speed benchmark


@pytest.fixture(scope="module")
def folded():
    return fold_batch_norm(SfanetModel(SfanetConfig(width=0.125, num_classes=4)).eval())


def test_bench_report_fields(folded):
    report = bench_fps(folded, (32, 64), warmup=1, iters=3)
    assert report.bn_folded and report.iters == 3 and len(report.latencies) == 3
    assert report.fps == pytest.approx(1.0 / report.mean_latency)
    assert any(line.startswith("fps: ") for line in report.lines())
    assert "bn_folded: True" in report.lines()


def test_bench_refuses_unfolded_model():
    with pytest.raises(UnfoldedModelError):
        bench_fps(SfanetModel(SfanetConfig(width=0.125)).eval(), (32, 32), iters=1)


@pytest.mark.parametrize("iters,warmup", [(0, 1), (1, -1)])
def test_bench_argument_checks(folded, iters, warmup):
    with pytest.raises(ValueError):
        bench_fps(folded, (32, 32), warmup=warmup, iters=iters)
