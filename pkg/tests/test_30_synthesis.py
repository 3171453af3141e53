import math

import attrs
import numpy as np
import pytest

from thz_sensing import geometry, padp, synthesis

ISOTROPIC = geometry.SounderConfig(antenna=geometry.AntennaPattern.isotropic(), add_noise=False)
NOISELESS = geometry.SounderConfig(add_noise=False)


def test_antenna_gain() -> None:
    pattern = geometry.AntennaPattern()

    assert float(synthesis.antenna_gain_db(pattern, 0.0)) == pytest.approx(25.5)
    assert float(synthesis.antenna_gain_db(pattern, 4.0)) == pytest.approx(22.5)
    assert float(synthesis.antenna_gain_db(pattern, -4.0)) == pytest.approx(22.5)
    assert float(synthesis.antenna_gain_db(pattern, 8.0)) == pytest.approx(13.5)
    assert float(synthesis.antenna_gain_db(pattern, 20.0)) == pytest.approx(-4.5)
    assert float(synthesis.antenna_gain_db(pattern, 360.0)) == pytest.approx(25.5)

    isotropic = geometry.AntennaPattern.isotropic()
    np.testing.assert_allclose(synthesis.antenna_gain_db(isotropic, [0.0, 90.0, 180.0]), 0.0)


def test_pattern_phase() -> None:
    np.testing.assert_array_equal(
        synthesis.pattern_phase_rad(geometry.AntennaPattern(), [0.0, 4.0, 90.0]), 0.0
    )

    rippled = geometry.AntennaPattern(phase_ripple_rad=0.5)
    res = synthesis.pattern_phase_rad(rippled, [0.0, 4.0, -4.0, 364.0])

    np.testing.assert_allclose(res, [0.0, 0.5, 0.5, 0.5])


def test_rotation_manifold() -> None:
    freqs = np.array([290e9, 300e9, 310e9])

    np.testing.assert_allclose(synthesis.rotation_manifold(freqs, 90.0, 0.2), 1.0, atol=1e-9)
    np.testing.assert_array_equal(synthesis.rotation_manifold(freqs, 30.0, 0.0), 1.0)

    res = synthesis.rotation_manifold(freqs, 0.0, 0.2)
    np.testing.assert_allclose(np.abs(res), 1.0)
    np.testing.assert_allclose(res, np.exp(4j * np.pi * freqs * 0.2 / geometry.C))

    with pytest.raises(ValueError):
        synthesis.rotation_manifold(freqs, 0.0, -0.1)


def test_cfr_from_paths_single_path() -> None:
    pose = geometry.TrxPose((0.0, 0.0), 0.2, 1)
    path = synthesis.GroundTruthPath(1.0, 5e-9, 30.0)

    cfr = synthesis.cfr_from_paths([path], pose, ISOTROPIC, angles=[30.0])

    expected = np.exp(-2j * np.pi * ISOTROPIC.freqs_hz() * 5e-9)
    np.testing.assert_allclose(cfr.data[0], expected, rtol=1e-9)
    assert cfr.data.shape == (1, 2001)
    assert cfr.truth == [path]


def test_cfr_from_paths_power() -> None:
    pose = geometry.TrxPose((0.0, 0.0), 0.2, 1)
    path = synthesis.GroundTruthPath(10 ** (-90 / 20), 5e-9, 90.0)

    cfr = synthesis.cfr_from_paths([path], pose, NOISELESS, angles=[92.0, 110.0, 270.0])

    power_db = 10 * np.log10(np.mean(np.abs(cfr.data[0]) ** 2))
    assert power_db == pytest.approx(-90 + 2 * 24.75, abs=1e-9)
    # beyond the main lobe floor the path is not seen
    assert not np.any(cfr.data[1])
    assert not np.any(cfr.data[2])


def test_cfr_from_paths_linearity() -> None:
    pose = geometry.TrxPose((0.0, 0.0), 0.2, 1)
    first = [
        synthesis.GroundTruthPath(1e-4, 5e-9, 88.0),
        synthesis.GroundTruthPath(2e-5j, 7.5e-9, 95.0),
    ]
    second = [synthesis.GroundTruthPath(-3e-5, 6.2e-9, 91.5)]
    angles = np.arange(80.0, 101.0)

    both = synthesis.cfr_from_paths(first + second, pose, NOISELESS, angles=angles)
    res = (
        synthesis.cfr_from_paths(first, pose, NOISELESS, angles=angles).data
        + synthesis.cfr_from_paths(second, pose, NOISELESS, angles=angles).data
    )

    np.testing.assert_allclose(both.data, res, rtol=1e-12, atol=1e-20)


def test_cfr_noise() -> None:
    pose = geometry.TrxPose((0.0, 0.0), 0.2, 1)
    cfg = geometry.SounderConfig()

    cfr = synthesis.cfr_from_paths([], pose, cfg, seed=7)

    profile = padp.compute_padp(cfr)
    mean_db = 10 * np.log10(np.mean(10 ** (profile.power_db / 10)))
    assert mean_db == pytest.approx(-120.0, abs=0.1)
    # no bin of a pure-noise profile reaches 15 dB above the floor
    assert profile.power_db.max() < -105.0

    again = synthesis.cfr_from_paths([], pose, cfg, seed=7)
    np.testing.assert_array_equal(cfr.data, again.data)

    other = synthesis.cfr_from_paths([], pose, cfg, seed=8)
    assert not np.array_equal(cfr.data, other.data)


def test_synthesize_cfr_single_wall(
    single_wall_scene: geometry.SceneModel,
    single_wall_pose: geometry.TrxPose,
    sounder: geometry.SounderConfig,
) -> None:
    cfr = synthesis.synthesize_cfr(single_wall_scene, single_wall_pose, sounder, seed=1)

    assert cfr.data.shape == (360, 2001)
    assert cfr.pose == single_wall_pose
    row = padp.compute_padp(cfr).row(90)
    peak = row.delays_s[int(np.argmax(row.power_db))]
    assert abs(peak - geometry.wall_specular_delay(1.2, 0.2, 90)) <= sounder.delay_bin_s

    again = synthesis.synthesize_cfr(single_wall_scene, single_wall_pose, sounder, seed=1)
    np.testing.assert_array_equal(cfr.data, again.data)


def test_scene_ground_truth(
    single_wall_scene: geometry.SceneModel,
    single_wall_pose: geometry.TrxPose,
    sounder: geometry.SounderConfig,
) -> None:
    truth = synthesis.scene_ground_truth(single_wall_scene, single_wall_pose, sounder)

    specular = [path for path in truth if path.origin == synthesis.PathOrigin.WALL_SPECULAR]
    assert len(specular) == 1
    expected_db = -geometry.fspl_db(300e9, 2.0) - 11.4
    assert specular[0].power_db == pytest.approx(expected_db)
    assert specular[0].delay_s == pytest.approx(2.0 / geometry.C)
    assert specular[0].azimuth_deg == pytest.approx(90.0)

    diffuse = [path for path in truth if path.origin == synthesis.PathOrigin.WALL_DIFFUSE]
    # 14 facets around the normal foot fall inside the specular footprint
    assert len(diffuse) == 286
    assert min(path.delay_s for path in diffuse) - specular[0].delay_s >= sounder.delay_resolution_s
    assert all(path.power_db < expected_db for path in diffuse)
    assert all(path.delay_s <= sounder.max_delay_s for path in truth)

    # facet phases are shared by every pose of a scene
    again = synthesis.scene_ground_truth(single_wall_scene, single_wall_pose, sounder)
    assert again == truth


def test_diffuse_power_db() -> None:
    material = geometry.CEMENT_WALL
    specular = synthesis.specular_level_db(300e9, 1.2, 0.2, material)

    assert specular == pytest.approx(-geometry.fspl_db(300e9, 2.0) - 11.4)
    at_normal = synthesis.diffuse_power_db(300e9, 1.2, 0.2, 1.2, 0.0, material)
    assert at_normal == pytest.approx(specular + 15.2 - 43.5)

    distance = 1.2 / math.cos(math.radians(30))
    res = synthesis.diffuse_power_db(300e9, 1.2, 0.2, distance, 30.0, material, 0.0, -40.0)
    extra_loss = geometry.fspl_db(300e9, 2 * (distance - 0.2)) - geometry.fspl_db(300e9, 2.0)
    assert res == pytest.approx(specular - 40.0 - extra_loss)


def test_synthesize_cfr_errors(
    single_wall_scene: geometry.SceneModel, sounder: geometry.SounderConfig
) -> None:
    with pytest.raises(geometry.SceneError, match="not part of scene"):
        synthesis.synthesize_cfr(
            single_wall_scene, geometry.TrxPose((0.0, 0.5), 0.2, 2), sounder
        )

    with pytest.raises(ValueError, match="does not match"):
        synthesis.DirectionalCfr(1, np.zeros(3), np.zeros(4), np.zeros((4, 3), dtype=complex))

    with pytest.raises(ValueError):
        synthesis.GroundTruthPath(0.0, 5e-9, 0.0)

    with pytest.raises(ValueError):
        synthesis.GroundTruthPath(1.0, 0.0, 0.0)


def test_noiseless_evolve(sounder: geometry.SounderConfig) -> None:
    noiseless = attrs.evolve(sounder, add_noise=False)
    pose = geometry.TrxPose((0.0, 0.0), 0.2, 1)

    cfr = synthesis.cfr_from_paths([], pose, noiseless)

    assert not np.any(cfr.data)
