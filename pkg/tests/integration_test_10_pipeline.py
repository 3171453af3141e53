import math
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd
import pytest

from thz_sensing import analytics, geometry, hybrid, sage, synthesis, tracking

C = 299_792_458.0

PoseRun = Tuple[sage.EstimateSet, List[tracking.Trajectory], List[hybrid.ClassifiedMpc]]


def run_pose(
    scene: geometry.SceneModel,
    pose: geometry.TrxPose,
    sounder: geometry.SounderConfig,
    cfr: synthesis.DirectionalCfr,
) -> PoseRun:
    est = sage.estimate_all(cfr, sage.SageConfig(), workers=4)
    try:
        reference = tracking.find_specular_reference(
            est, scene, pose, delay_bin_s=sounder.delay_resolution_s
        )
        weights = tracking.compute_weights(reference)
    except tracking.CalibrationError:
        weights = tracking.McdWeights()
    trajs = tracking.track_trajectories(est, weights, tracking.TrackerConfig())
    deembedded = tracking.deembed(trajs, refine_azimuth=True)
    classified = hybrid.classify(
        deembedded, scene, pose, delay_bin_s=sounder.delay_resolution_s, f_c=sounder.f_c_hz
    )
    return est, trajs, classified


@pytest.fixture(scope="module")
def lab() -> geometry.SceneModel:
    return geometry.default_l_scene()


@pytest.fixture(scope="module")
def pipeline(lab: geometry.SceneModel) -> Callable[[int, bool], PoseRun]:
    runs: Dict[Tuple[int, bool], PoseRun] = {}

    def run(pose_index: int, add_noise: bool = True) -> PoseRun:
        if (pose_index, add_noise) not in runs:
            sounder = geometry.SounderConfig(add_noise=add_noise)
            pose = lab.pose(pose_index)
            cfr = synthesis.synthesize_cfr(lab, pose, sounder, seed=0)
            runs[pose_index, add_noise] = run_pose(lab, pose, sounder, cfr)
        return runs[pose_index, add_noise]

    return run


def strongest_specular(
    classified: List[hybrid.ClassifiedMpc], kind: str, azimuth: float
) -> hybrid.ClassifiedMpc:
    near = [
        item
        for item in classified
        if item.label == hybrid.MpcLabel.TARGET_SPECULAR
        and item.matched_feature is not None
        and item.matched_feature.kind == kind
        and abs(geometry.wrap_deg(item.mpc.azimuth_deg - azimuth)) <= 1.0
    ]
    assert near, (kind, azimuth)
    return max(near, key=lambda item: item.mpc.power_db)


def test_workers_are_deterministic(
    lab: geometry.SceneModel, pipeline: Callable[[int, bool], PoseRun]
) -> None:
    estimates, _, _ = pipeline(14, True)
    cfr = synthesis.synthesize_cfr(lab, lab.pose(14), geometry.SounderConfig(), seed=0)

    res = sage.estimate_all(cfr, sage.SageConfig(), workers=1)

    pd.testing.assert_frame_equal(res.to_frame(), estimates.to_frame())


def test_no_estimate_exceeds_its_row(
    lab: geometry.SceneModel, pipeline: Callable[[int, bool], PoseRun]
) -> None:
    estimates, _, _ = pipeline(14, False)
    sounder = geometry.SounderConfig(add_noise=False)
    cfr = synthesis.synthesize_cfr(lab, lab.pose(14), sounder, seed=0)

    for angle, row in zip(estimates.angles, cfr.data):
        if angle.mpcs:
            assert angle.mpcs[0].power_db <= 10 * math.log10(np.mean(np.abs(row) ** 2)) + 1e-6


def test_wall_speculars_recovered(pipeline: Callable[[int, bool], PoseRun]) -> None:
    _, _, classified = pipeline(14, True)
    expected_delay = 2 * (1.2 - 0.2) / C

    for azimuth in (180.0, 270.0):
        item = strongest_specular(classified, "wall", azimuth)
        assert abs(item.mpc.delay_s - expected_delay) < 0.05e-9


@pytest.mark.parametrize("add_noise", [True, False])
def test_reflection_loss_recovered(
    pipeline: Callable[[int, bool], PoseRun], add_noise: bool
) -> None:
    _, _, at_bend = pipeline(14, add_noise)
    _, _, over_window = pipeline(19, add_noise)

    for azimuth in (180.0, 270.0):
        item = strongest_specular(at_bend, "wall", azimuth)
        res = analytics.reflection_loss_by_kind([item])
        assert res["wall"]["mean_db"] == pytest.approx(11.4, abs=0.5), azimuth

    item = strongest_specular(over_window, "window", 270.0)
    res = analytics.reflection_loss_by_kind([item])
    assert res["window"]["mean_db"] == pytest.approx(2.5, abs=0.5)


@pytest.mark.parametrize("add_noise, limit_m", [(True, 0.03), (False, 0.0075)])
def test_reconstruction_accuracy(
    lab: geometry.SceneModel,
    pipeline: Callable[[int, bool], PoseRun],
    add_noise: bool,
    limit_m: float,
) -> None:
    _, _, classified = pipeline(14, add_noise)
    matched = [item.mpc for item in classified if item.label != hybrid.MpcLabel.UNMATCHED]

    points = analytics.reconstruct_environment(matched, lab.pose(14))
    cdf = analytics.distance_error_cdf(points, lab)

    assert len(points) > 10
    assert cdf.mean_m is not None
    assert cdf.mean_m <= limit_m


def test_deembedding_matches_discrete_paths(lab: geometry.SceneModel) -> None:
    sounder = geometry.SounderConfig()
    pose = lab.pose(14)
    truth = [
        path
        for path in synthesis.scene_ground_truth(lab, pose, sounder)
        if path.kind == "specular"
    ]
    cfr = synthesis.cfr_from_paths(truth, pose, sounder, seed=0)
    _, trajs, _ = run_pose(lab, pose, sounder, cfr)
    deembedded = tracking.deembed(trajs, refine_azimuth=True)
    # threshold sits 10 dB over the floor, and the paths checked clear it by another 15 dB
    strong = [
        path
        for path in truth
        if path.power_db + 2 * sounder.antenna.boresight_gain_dbi >= sounder.noise_floor_db + 25.0
    ]

    found = [
        any(
            abs(mpc.delay_s - path.delay_s) <= sounder.delay_bin_s
            and abs(geometry.wrap_deg(mpc.azimuth_deg - path.azimuth_deg)) <= 1.0
            for mpc in deembedded
        )
        for path in strong
    ]

    assert len(strong) >= 4
    assert np.mean(found) >= 0.95


@pytest.mark.parametrize("add_noise", [True, False])
def test_linked_pairs_respect_gate(
    pipeline: Callable[[int, bool], PoseRun], add_noise: bool
) -> None:
    _, trajs, _ = pipeline(14, add_noise)
    gate = tracking.TrackerConfig().delay_gate_s

    assert trajs
    for traj in trajs:
        angles, delays = traj.angles_deg, traj.delays_s
        np.testing.assert_allclose(np.abs(geometry.wrap_deg(np.diff(angles))), 1.0)
        assert np.all(np.abs(np.diff(delays)) <= gate * (1 + 1e-9))


def test_diffuse_fit_on_route_bend(pipeline: Callable[[int, bool], PoseRun]) -> None:
    classified: List[hybrid.ClassifiedMpc] = []
    for pose_index in (13, 14, 15):
        classified += pipeline(pose_index, True)[2]

    model = hybrid.fit_diffuse_model(classified, relative_to_specular=True)

    assert model.n_samples >= 2
    assert math.isfinite(model.n_diff)
    assert math.isfinite(model.b_diff)
    assert np.isfinite(model.rmse)
