import numpy as np
import pytest

from fruitmon.cloud import ColoredCloud, SceneAnnotation
from fruitmon.synth import OrchardConfig, generate_pair, generate_scene


def small_orchard(seed: int = 0, **overrides) -> OrchardConfig:
    base = dict(
        row_length=0.3,
        fruit_count=(4, 6),
        points_per_fruit=(120, 160),
        canopy_density=15000,
        drift_sigma=0.004,
        disappear_prob=0.2,
        appear_prob=0.2,
        rng_seed=seed,
    )
    base.update(overrides)
    return OrchardConfig(**base)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(small_orchard(3))


@pytest.fixture(scope="session")
def small_pair():
    return generate_pair(small_orchard(11))


def random_cloud(rng, n: int = 60, scale: float = 0.5) -> ColoredCloud:
    # float32-representable coordinates so PLY round-trips are bit-exact
    pts = (rng.uniform(-scale, scale, (n, 3))).astype(np.float32).astype(np.float64)
    cols = rng.uniform(0.0, 1.0, (n, 3))
    return ColoredCloud(pts, cols)


def random_annotation(rng, n_points: int, n_instances: int = 3) -> SceneAnnotation:
    ids = rng.integers(-1, n_instances, size=n_points)
    pts = rng.normal(size=(n_points, 3))
    return SceneAnnotation.from_instance_ids(pts, ids), pts
