import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fruitmon.cloud import (
    AugmentConfig,
    ColoredCloud,
    FruitInstance,
    SceneAnnotation,
    TemporalAssociation,
    augment,
    crop_box,
    load_ply,
    save_ply,
)
from fruitmon.errors import PlyParseError, ValidationError
from conftest import random_cloud


# ---------------------------------------------------------------------------
# PLY round-trips


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_bitexact_points(tmp_path, binary):
    rng = np.random.default_rng(0)
    for i in range(1000):
        cl = random_cloud(rng, n=20)
        path = tmp_path / f"c{binary}.ply"
        save_ply(path, cl, binary=binary)
        back, ann = load_ply(path)
        assert ann is None
        assert np.array_equal(back.points, cl.points)
        assert np.abs(back.colors - cl.colors).max() <= 1.0 / 255.0 + 1e-12


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_annotation(tmp_path, binary):
    rng = np.random.default_rng(1)
    cl = random_cloud(rng, n=120)
    ids = rng.integers(-1, 4, size=120)
    ids[:5] = np.arange(4 + 1) - 1  # every id present at least once
    ann = SceneAnnotation.from_instance_ids(cl.points, ids)
    path = tmp_path / "a.ply"
    save_ply(path, cl, ann, binary=binary)
    back, ann2 = load_ply(path)
    assert ann2 is not None
    assert np.array_equal(ann2.instance_ids(len(cl)), ann.instance_ids(len(cl)))
    assert np.array_equal(ann2.per_point_semantic, ann.per_point_semantic)


def test_ply_binary_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(2)
    cl = random_cloud(rng, n=200)
    save_ply(tmp_path / "x.ply", cl)
    save_ply(tmp_path / "y.ply", cl)
    assert (tmp_path / "x.ply").read_bytes() == (tmp_path / "y.ply").read_bytes()


def test_ply_rejects_nan(tmp_path):
    pts = np.zeros((3, 3))
    pts[1, 2] = np.nan
    with pytest.raises(ValidationError, match="1"):
        ColoredCloud(pts, np.zeros((3, 3)))


def test_ply_parser_errors(tmp_path):
    bad_magic = tmp_path / "m.ply"
    bad_magic.write_text("ply2\nend_header\n")
    with pytest.raises(PlyParseError):
        load_ply(bad_magic)

    listy = tmp_path / "l.ply"
    listy.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property list uchar int vertex_indices\nend_header\n0\n")
    with pytest.raises(PlyParseError, match="list"):
        load_ply(listy)

    short = tmp_path / "s.ply"
    short.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
        "0 0 0\n")
    with pytest.raises(PlyParseError):
        load_ply(short)


def test_ply_unknown_property_ignored(tmp_path):
    path = tmp_path / "extra.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property float confidence\nend_header\n"
        "0.5 0.25 -1 255 0 128 0.9\n")
    cl, ann = load_ply(path)
    assert np.array_equal(cl.points, [[0.5, 0.25, -1.0]])
    assert np.allclose(cl.colors, [[1.0, 0.0, 128 / 255.0]])


# ---------------------------------------------------------------------------
# annotations and associations


def test_annotation_partition_validates():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 3))
    ids = rng.integers(-1, 3, size=50)
    ann = SceneAnnotation.from_instance_ids(pts, ids)
    ann.validate(50)
    counted = sum(inst.point_indices.size for inst in ann.instances)
    assert counted + ann.background_indices.size == 50
    # overlap is rejected
    bad = SceneAnnotation(
        instances=[FruitInstance.from_points(pts, np.array([0, 1])),
                   FruitInstance.from_points(pts, np.array([1, 2]))],
        background_indices=np.arange(3, 50),
        per_point_semantic=ann.per_point_semantic,
    )
    with pytest.raises(ValidationError):
        bad.validate(50)


def test_instance_center_radius():
    pts = np.array([[0.0, 0, 0], [2, 0, 0], [0, 2, 0], [2, 2, 0]])
    inst = FruitInstance.from_points(pts, np.arange(4))
    assert np.allclose(inst.center, [1, 1, 0])
    assert np.isclose(inst.radius, np.sqrt(2))


def test_association_round_trip(tmp_path):
    assoc = TemporalAssociation({0: 2, 1: None, 2: 0})
    path = tmp_path / "a.csv"
    assoc.save_csv(path)
    text = path.read_text()
    assert text.splitlines()[0] == "t_id,prev_id"
    back = TemporalAssociation.load_csv(path)
    assert back.pairs == assoc.pairs


def test_association_rejects_duplicate_targets():
    with pytest.raises(ValidationError):
        TemporalAssociation({0: 1, 1: 1})


# ---------------------------------------------------------------------------
# crop


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), width=st.floats(0.05, 0.6))
def test_crop_matches_linear_scan(seed, width):
    rng = np.random.default_rng(seed)
    cl = random_cloud(rng, n=80)
    ids = rng.integers(-1, 3, size=80)
    ann = SceneAnnotation.from_instance_ids(cl.points, ids)
    center = rng.uniform(-0.3, 0.3, 3)
    out, out_ann = crop_box(cl, ann, center, width, axis=0)
    keep = np.flatnonzero(np.abs(cl.points[:, 0] - center[0]) <= width / 2)
    assert np.array_equal(out.points, cl.points[keep])
    # surviving instances keep their points, re-indexed
    old_ids = ann.instance_ids(80)[keep]
    new_ids = out_ann.instance_ids(len(out))
    for old in np.unique(old_ids[old_ids >= 0]):
        mask = old_ids == old
        got = np.unique(new_ids[mask])
        assert got.size == 1 and got[0] >= 0


def test_crop_scene_width(small_scene):
    cl, ann = small_scene
    out, out_ann = crop_box(cl, ann, cl.points.mean(axis=0), 0.3, axis=0)
    out_ann.validate(len(out))
    assert len(out) <= len(cl)


# ---------------------------------------------------------------------------
# augmentation


def test_augment_same_seed_identical(small_scene):
    cl, ann = small_scene
    cfg = AugmentConfig(yaw_range_deg=(-180, 180), per_axis_rotation_range_deg=(-30, 30),
                        flip_axes=(0,), scale_range=(0.9, 1.1), point_jitter_sigma=1e-3,
                        color_jitter_sigma=0.05, rng_seed=7)
    a1, n1 = augment(cl, ann, cfg)
    a2, n2 = augment(cl, ann, cfg)
    assert np.array_equal(a1.points, a2.points)
    assert np.array_equal(a1.colors, a2.colors)
    assert np.array_equal(n1.instance_ids(len(a1)), n2.instance_ids(len(a2)))


def test_augment_rigid_parts_preserve_distances(small_scene):
    cl, ann = small_scene
    cfg = AugmentConfig(yaw_range_deg=(-180, 180),
                        per_axis_rotation_range_deg=(-30, 30), rng_seed=1)
    out, _ = augment(cl, ann, cfg)
    d_before = np.linalg.norm(cl.points[0] - cl.points[1])
    d_after = np.linalg.norm(out.points[0] - out.points[1])
    assert np.isclose(d_before, d_after, rtol=1e-9)
    assert np.array_equal(out.colors, cl.colors)


def test_augment_instances_rebuilt(small_scene):
    cl, ann = small_scene
    cfg = AugmentConfig(scale_range=(2.0, 2.0), rng_seed=0)
    out, out_ann = augment(cl, ann, cfg)
    for before, after in zip(ann.instances, out_ann.instances):
        assert np.array_equal(before.point_indices, after.point_indices)
        assert np.isclose(after.radius, 2.0 * before.radius, rtol=1e-9)


def test_augment_zero_config_is_identity(small_scene):
    cl, ann = small_scene
    out, _ = augment(cl, ann, AugmentConfig(rng_seed=5))
    assert np.array_equal(out.points, cl.points)
    assert np.array_equal(out.colors, cl.colors)
