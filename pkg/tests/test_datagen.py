import math

import numpy as np
import pytest

from lccalib.camera import KITTI_HALF
from lccalib.datagen import (
    GROUND_Y,
    SCENE_KINDS,
    DecalibrationSpec,
    generate_samples,
    make_sample,
    rng_for,
    sample_decalibration,
    synth_scene,
)
from lccalib.lie import Se3Params, inverse, to_transform
from lccalib.transformer import resample_depth_map, scatter

K = KITTI_HALF
N_DRAWS = 10_000


def test_zero_ranges_give_zero():
    spec = DecalibrationSpec(0.0, 0.0, seed=3)
    for i in range(20):
        assert np.array_equal(sample_decalibration(spec, i).as_vector(), np.zeros(6))


def test_default_ranges_and_statistics():
    spec = DecalibrationSpec(seed=11)
    xs = np.array([sample_decalibration(spec, i).as_vector() for i in range(N_DRAWS)])
    # +-10 degrees = +-0.1745 rad, +-0.2 m.
    assert np.all(np.abs(xs[:, 3:]) <= math.radians(10.0)) and np.all(np.abs(xs[:, :3]) <= 0.2)
    ranges = np.array([0.2] * 3 + [math.radians(10.0)] * 3)
    sigma = ranges / math.sqrt(3) / 100
    assert np.all(np.abs(xs.mean(axis=0)) < 3 * sigma)
    assert np.all(xs.max(axis=0) > 0.99 * ranges) and np.all(xs.min(axis=0) < -0.99 * ranges)


def test_sampling_is_deterministic_per_index():
    spec = DecalibrationSpec(seed=5)
    a = sample_decalibration(spec, 17).as_vector()
    assert np.array_equal(a, sample_decalibration(spec, 17).as_vector())
    assert not np.array_equal(a, sample_decalibration(spec, 18).as_vector())
    assert not np.array_equal(a, sample_decalibration(DecalibrationSpec(seed=6), 17).as_vector())
    # Pinned to the PCG64 stream of SeedSequence([seed, index]).
    u = np.random.Generator(np.random.PCG64(np.random.SeedSequence([5, 17]))).uniform(-1, 1, 6)
    assert np.array_equal(a, np.concatenate([u[:3] * 0.2, u[3:] * math.radians(10.0)]))
    assert rng_for(5, 17).uniform() == rng_for(5, 17).uniform()


def test_spec_validation():
    with pytest.raises(ValueError):
        DecalibrationSpec(-1.0, 0.1)
    with pytest.raises(ValueError):
        DecalibrationSpec(count=0)


@pytest.fixture(scope="module")
def scene():
    return synth_scene("ground_plane_boxes", 5000, 0)


def test_scene_properties(scene):
    assert len(scene) == 5000
    assert np.array_equal(scene.points, synth_scene("ground_plane_boxes", 5000, 0).points)
    ground = np.isclose(scene.points[:, 1], GROUND_Y)
    assert ground.sum() >= 2000 and np.all(scene.points[ground, 1] == GROUND_Y)
    z = scene.points[:, 2]
    assert z.min() >= 2.0 and z.max() <= 41.0
    for kind in SCENE_KINDS:
        assert len(synth_scene(kind, 1234, 1)) == 1234
    with pytest.raises(ValueError):
        synth_scene("ground_plane_boxes", 50)
    with pytest.raises(ValueError):
        synth_scene("forest", 500)


def test_zero_xi_sample(scene):
    s = make_sample(scene, K, Se3Params(), 0)
    assert np.array_equal(s.miscalib_map.values, s.target_map.values)
    assert np.array_equal(s.ground_truth.matrix(), np.eye(4))


def test_pure_z_translation_shifts_depth(scene):
    s = make_sample(scene, K, Se3Params([0, 0, 0.2], [0, 0, 0]), 0)
    mis = s.miscalib_map.values[s.miscalib_map.valid]
    tgt = s.target_map.values[s.target_map.valid]
    # Each target depth comes from a miscalibrated point moved back by exactly 0.2 m.
    assert np.all(np.abs((tgt + 0.2)[:, None] - mis[None, :]).min(axis=1) < 1e-12)


def test_sample_recipe_and_ground_truth(scene):
    xi = sample_decalibration(DecalibrationSpec(seed=2), 0)
    s = make_sample(scene, K, xi, 4)
    assert s.sample_id == 4
    assert np.abs(s.ground_truth.matrix() - inverse(to_transform(xi)).matrix()).max() < 1e-15
    assert np.array_equal(s.miscalib_map.values, scatter(s.miscalib_cloud, K).values)
    assert np.array_equal(s.target_map.values, resample_depth_map(s.miscalib_map, s.ground_truth, K).values)


def test_generate_samples_count(scene):
    samples = generate_samples(scene, K, DecalibrationSpec(seed=0, count=3))
    assert [s.sample_id for s in samples] == [0, 1, 2]


def test_no_visible_points_is_an_error(scene):
    with pytest.raises(ValueError):
        make_sample(scene, K, Se3Params([0, 0, -100.0], [0, 0, 0]), 0)
