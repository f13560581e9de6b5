import logging

import numpy as np
import pytest

from fruitmon.cloud import ColoredCloud
from fruitmon.encoder import (
    DescriptorSet,
    EncoderConfig,
    build_encoder,
    encode,
    encode_all,
    extract_support,
    load_descriptors,
    save_descriptors,
)
from fruitmon.errors import ConfigError, ValidationError
from fruitmon.synth import generate_scene
from conftest import small_orchard

TINY = EncoderConfig(support_radius=0.03, voxel_size=0.004, channels=(4, 4, 8),
                     max_support_points=60000, rng_seed=0)


def _scene():
    cfg = small_orchard(seed=20, fruit_count=(4, 4), points_per_fruit=(80, 120),
                        canopy_density=4000)
    return generate_scene(cfg)


def test_encoder_config_validation():
    assert TINY.descriptor_dim == 8
    with pytest.raises(ConfigError):
        EncoderConfig(support_radius=0.0)
    with pytest.raises(ConfigError):
        EncoderConfig(channels=(8,))
    with pytest.raises(ConfigError):
        EncoderConfig(max_support_points=0)


def test_batched_encoding_matches_single():
    cloud, ann = _scene()
    model = build_encoder(TINY)
    dset = encode_all(cloud, ann.instances, model)
    assert dset.vectors.shape == (len(ann.instances), TINY.descriptor_dim)
    for i, inst in enumerate(ann.instances):
        single = encode(cloud, inst.center, model)
        assert np.array_equal(single, dset.vectors[i])


def test_descriptors_translation_invariant():
    # dyadic coordinates keep every add/subtract exact, so a shifted scene
    # re-centers to bit-identical supports and descriptors
    rng = np.random.default_rng(5)
    v = 0.0078125  # 2**-7
    pts = rng.integers(0, 8, (200, 3)) * (v / 8.0)
    colors = rng.integers(0, 256, (200, 3)) / 255.0
    cloud = ColoredCloud(pts, colors)
    center = np.array([4 * v / 8.0] * 3)
    model = build_encoder(TINY)
    base = encode(cloud, center, model)
    shift = 16 * v
    moved = ColoredCloud(pts + shift, colors)
    assert np.array_equal(encode(moved, center + shift, model), base)


def test_empty_support_zero_descriptor_and_warning(caplog):
    cloud, ann = _scene()
    model = build_encoder(EncoderConfig(support_radius=1e-6, voxel_size=0.004,
                                        channels=(4, 8), rng_seed=0))
    with caplog.at_level(logging.WARNING, logger="fruitmon.encoder"):
        dset = encode_all(cloud, ann.instances, model)
    assert np.array_equal(dset.vectors, np.zeros_like(dset.vectors))
    assert any("empty support" in rec.message for rec in caplog.records)


def test_extract_support_subsample_deterministic():
    cloud, ann = _scene()
    cfg = EncoderConfig(support_radius=0.03, voxel_size=0.004, channels=(4, 8),
                        max_support_points=40, rng_seed=3)
    a = extract_support(cloud, ann.instances[0].center, cfg,
                        rng=np.random.default_rng(9))
    b = extract_support(cloud, ann.instances[0].center, cfg,
                        rng=np.random.default_rng(9))
    assert len(a) == 40
    assert np.array_equal(a.points, b.points)
    # sorted selection preserves the original point order
    full = extract_support(cloud, ann.instances[0].center,
                           EncoderConfig(support_radius=0.03, voxel_size=0.004,
                                         channels=(4, 8)))
    pos = [np.flatnonzero((full.points == p).all(axis=1))[0] for p in a.points]
    assert pos == sorted(pos)


def test_support_is_recentred_ball():
    cloud, ann = _scene()
    sup = extract_support(cloud, ann.instances[0].center, TINY)
    assert len(sup) > 0
    assert np.linalg.norm(sup.points, axis=1).max() <= TINY.support_radius + 1e-12


def test_descriptor_csv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    dset = DescriptorSet(rng.normal(size=(5, 8)))
    path = tmp_path / "desc.csv"
    save_descriptors(path, dset, config=TINY)
    loaded, meta = load_descriptors(path)
    assert np.array_equal(loaded.vectors, dset.vectors)  # %.17g is lossless
    assert meta["schema_version"] == 1
    assert meta["descriptor_dim"] == 8
    assert meta["count"] == 5
    assert meta["encoder_config"]["support_radius"] == TINY.support_radius
    assert "encoder_config_hash" in meta


def test_load_descriptors_without_sidecar(tmp_path):
    dset = DescriptorSet(np.ones((2, 4)))
    path = tmp_path / "desc.csv"
    save_descriptors(path, dset, config=TINY)
    (tmp_path / "desc.csv.meta.json").unlink()
    loaded, meta = load_descriptors(path)
    assert meta is None
    assert loaded.vectors.shape == (2, 4)


def test_load_descriptors_rejects_garbage(tmp_path):
    path = tmp_path / "junk.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValidationError):
        load_descriptors(path)


def test_descriptor_set_must_be_2d():
    with pytest.raises(ValidationError):
        DescriptorSet(np.zeros(4))
