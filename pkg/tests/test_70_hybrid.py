import math

import attrs
import numpy as np
import pytest

from thz_sensing import geometry, hybrid, synthesis
from thz_sensing.hybrid import ClassifiedMpc, FeatureRef, MpcLabel
from thz_sensing.tracking import DeembeddedMpc

C = geometry.C
WALL = FeatureRef("wall", (0,))


def diffuse_sample(delta_phi_deg: float, power_db: float) -> ClassifiedMpc:
    return ClassifiedMpc(
        mpc=DeembeddedMpc(1e-5, 8e-9, 90.0 + delta_phi_deg),
        label=MpcLabel.ENVIRONMENT_DIFFUSE,
        matched_feature=WALL,
        delta_phi_deg=delta_phi_deg,
        compensated_power_db=power_db,
    )


def specular_sample(power_db: float) -> ClassifiedMpc:
    return ClassifiedMpc(
        mpc=DeembeddedMpc(1e-3, 6.67e-9, 90.0),
        label=MpcLabel.TARGET_SPECULAR,
        matched_feature=WALL,
        delta_phi_deg=0.0,
        compensated_power_db=power_db,
    )


def mpc_at(azimuth_deg: float, delay_s: float, power_db: float = -60.0) -> DeembeddedMpc:
    return DeembeddedMpc(10 ** (power_db / 20), delay_s, azimuth_deg, 0)


def test_fit_diffuse_model_two_points() -> None:
    res = hybrid.fit_diffuse_model([diffuse_sample(0.0, -130.0), diffuse_sample(90.0, -140.0)])

    assert res.n_diff == pytest.approx(10.0)
    assert res.b_diff == pytest.approx(-140.0)
    assert res.rmse == pytest.approx(0.0, abs=1e-9)
    assert res.n_samples == 2
    assert not res.relative_to_specular


def test_fit_diffuse_model_exact() -> None:
    deltas = np.linspace(-80.0, 80.0, 33)
    model = hybrid.DiffusePowerModel(15.2, -144.5)
    samples = [diffuse_sample(d, float(model.power_db(d))) for d in deltas]

    res = hybrid.fit_diffuse_model(samples)

    assert res.n_diff == pytest.approx(15.2)
    assert res.b_diff == pytest.approx(-144.5)
    assert res.rmse == pytest.approx(0.0, abs=1e-9)


def test_fit_diffuse_model_noisy() -> None:
    rng = np.random.default_rng(2024)
    deltas = rng.uniform(-60.0, 60.0, 200)
    cos2 = np.cos(np.radians(deltas)) ** 2
    # residuals orthogonal to the regressors with a 3 dB spread
    design = np.column_stack([cos2, np.ones_like(cos2)])
    errors = rng.normal(0.0, 3.0, 200)
    errors -= design @ np.linalg.lstsq(design, errors, rcond=None)[0]
    errors *= 3.0 / np.sqrt(np.mean(errors**2))
    samples = [
        diffuse_sample(d, 15.2 * c - 144.5 + e) for d, c, e in zip(deltas, cos2, errors)
    ]

    res = hybrid.fit_diffuse_model(samples)

    assert res.n_diff == pytest.approx(15.2, abs=1e-6)
    assert res.b_diff == pytest.approx(-144.5, abs=1e-6)
    assert res.rmse == pytest.approx(3.0, abs=1e-6)

    # no perturbation of the fitted coefficients lowers the squared error
    def sse(n_diff: float, b_diff: float) -> float:
        return float(np.sum((15.2 * cos2 - 144.5 + errors - n_diff * cos2 - b_diff) ** 2))

    best = sse(res.n_diff, res.b_diff)
    for dn, db in ((0.1, 0), (-0.1, 0), (0, 0.1), (0, -0.1)):
        assert sse(res.n_diff + dn, res.b_diff + db) >= best


def test_fit_diffuse_model_relative() -> None:
    samples = [specular_sample(-50.0)] + [
        diffuse_sample(d, -50.0 + 15.2 * math.cos(math.radians(d)) ** 2 - 43.5)
        for d in (-40.0, -10.0, 20.0, 50.0)
    ]

    res = hybrid.fit_diffuse_model(samples, relative_to_specular=True)

    assert res.n_diff == pytest.approx(15.2)
    assert res.b_diff == pytest.approx(-43.5)
    assert res.relative_to_specular
    assert res.n_samples == 4

    # diffuse samples of a wall without a specular reference are left out
    with pytest.raises(hybrid.NumericalError):
        hybrid.fit_diffuse_model(samples[1:], relative_to_specular=True)


def test_fit_diffuse_model_degenerate() -> None:
    with pytest.raises(hybrid.NumericalError):
        hybrid.fit_diffuse_model([diffuse_sample(10.0, -130.0)])

    with pytest.raises(hybrid.NumericalError):
        hybrid.fit_diffuse_model([diffuse_sample(10.0, -130.0), diffuse_sample(-10.0, -131.0)])

    with pytest.raises(hybrid.NumericalError):
        hybrid.fit_diffuse_model([])


def test_classify(
    single_wall_scene: geometry.SceneModel, single_wall_pose: geometry.TrxPose
) -> None:
    mpcs = [
        mpc_at(90.0, 2.0 / C),
        mpc_at(120.0, geometry.wall_diffuse_delay(1.2, 0.2, 30.0)),
        mpc_at(90.0, 50e-9),
        mpc_at(270.0, 8e-9),
    ]

    res = hybrid.classify(mpcs, single_wall_scene, single_wall_pose)

    assert [item.label for item in res] == [
        MpcLabel.TARGET_SPECULAR,
        MpcLabel.ENVIRONMENT_DIFFUSE,
        MpcLabel.UNMATCHED,
        MpcLabel.UNMATCHED,
    ]
    assert res[0].matched_feature == WALL
    assert res[0].compensated_power_db == pytest.approx(-60.0)
    assert res[1].matched_feature == WALL
    assert res[1].delta_phi_deg == pytest.approx(30.0, abs=1e-6)
    assert res[1].reference_delay_s == pytest.approx(2.0 / C)
    expected = -60.0 + geometry.fspl_db(300e9, C * mpcs[1].delay_s) - geometry.fspl_db(300e9, 2.0)
    assert res[1].compensated_power_db == pytest.approx(expected)
    assert res[2].matched_feature is None

    # labels do not depend on the input order
    reversed_res = hybrid.classify(mpcs[::-1], single_wall_scene, single_wall_pose)
    assert reversed_res == res[::-1]

    assert hybrid.classify([], single_wall_scene, single_wall_pose) == []


def test_classify_corner(corner_scene: geometry.SceneModel) -> None:
    pose = corner_scene.pose(1)
    delay = geometry.corner_specular_delay(1.2, 0.2, 0.0, 45.0)

    (res,) = hybrid.classify([mpc_at(225.0, delay)], corner_scene, pose)

    assert res.label == MpcLabel.TARGET_SPECULAR
    assert res.matched_feature == FeatureRef("corner", (0, 1))


def test_classified_mpc_validation() -> None:
    with pytest.raises(ValueError):
        ClassifiedMpc(mpc=mpc_at(0.0, 5e-9), label=MpcLabel.UNMATCHED, matched_feature=WALL)

    with pytest.raises(ValueError):
        ClassifiedMpc(mpc=mpc_at(0.0, 5e-9), label=MpcLabel.TARGET_SPECULAR)


def consistency_scene() -> geometry.SceneModel:
    wall = geometry.WallSegment((-10.0, 1.2), (10.0, 1.2))
    poses = [geometry.TrxPose((x - 6.5, 0.0), 0.2, m) for m, x in enumerate(range(14), 1)]
    return geometry.SceneModel([wall], poses)


def test_specular_power_consistency() -> None:
    scene = consistency_scene()
    per_pose = {m: [mpc_at(90.0, 2.0 / C, -48.3)] for m in range(1, 15)}

    res = hybrid.specular_power_consistency(per_pose, scene)

    assert res.range_db == pytest.approx(0.0)
    assert res.outliers == ()
    assert res.missing == ()
    assert res.powers_db[7] == pytest.approx(-48.3)

    for m in (2, 5, 9, 11):
        per_pose[m] = [mpc_at(90.0, 2.0 / C, -42.3)]
    per_pose[14] = [mpc_at(270.0, 8e-9)]

    res = hybrid.specular_power_consistency(per_pose, scene)

    assert res.outliers == (2, 5, 9, 11)
    assert res.missing == (14,)
    assert res.range_db == pytest.approx(6.0)
    assert res.range_without_outliers_db == pytest.approx(0.0)
    assert res.to_json()["powers_db"]["1"] == pytest.approx(-48.3)


def test_specular_power_consistency_single_pose() -> None:
    scene = consistency_scene()

    res = hybrid.specular_power_consistency({3: [mpc_at(90.0, 2.0 / C)]}, scene)

    assert res.range_db == 0.0

    res = hybrid.specular_power_consistency({}, scene)

    assert res.range_db is None


def test_synthesize_hybrid_cir(
    single_wall_scene: geometry.SceneModel,
    single_wall_pose: geometry.TrxPose,
    sounder: geometry.SounderConfig,
) -> None:
    model = hybrid.DiffusePowerModel(0.0, -40.0, relative_to_specular=True)
    specular_db = -geometry.fspl_db(300e9, 2.0) - 11.4

    cir = hybrid.synthesize_hybrid_cir(single_wall_scene, single_wall_pose, model, sounder)
    unfolded = hybrid.synthesize_hybrid_cir(
        single_wall_scene, single_wall_pose, model, sounder, tol_delay_bins=0, tol_angle_deg=0
    )

    assert len(cir.target) == 1
    assert cir.target[0].delay_s == pytest.approx(2.0 / C)
    assert 20 * math.log10(abs(unfolded.target[0].amplitude)) == pytest.approx(specular_db)
    assert cir.environment
    for path in cir.environment:
        power_db = 20 * math.log10(abs(path.amplitude))
        assert power_db + geometry.fspl_db(300e9, C * path.delay_s) + 11.4 == pytest.approx(-40.0)

    # facets inside the specular tolerance end up on the target path
    kept = {(path.delay_s, path.azimuth_deg) for path in cir.environment}
    folded = [
        path.amplitude
        for path in unfolded.environment
        if (path.delay_s, path.azimuth_deg) not in kept
    ]
    assert folded
    assert cir.target[0].amplitude == pytest.approx(unfolded.target[0].amplitude + sum(folded))

    freqs = sounder.freqs_hz()
    np.testing.assert_allclose(
        hybrid.hybrid_response(cir, freqs),
        hybrid.hybrid_response(cir, freqs, "target")
        + hybrid.hybrid_response(cir, freqs, "environment"),
        rtol=1e-12,
    )

    with pytest.raises(ValueError, match="unknown part"):
        hybrid.hybrid_response(cir, freqs, "specular")


def test_synthesize_hybrid_cir_absolute_model(
    single_wall_scene: geometry.SceneModel,
    single_wall_pose: geometry.TrxPose,
    sounder: geometry.SounderConfig,
) -> None:
    model = hybrid.DiffusePowerModel(15.2, -144.5)

    cir = hybrid.synthesize_hybrid_cir(single_wall_scene, single_wall_pose, model, sounder)

    assert cir.environment
    for path in cir.environment:
        delta_phi = geometry.wrap_deg(path.azimuth_deg - 90.0)
        extra_loss = geometry.fspl_db(300e9, C * path.delay_s) - geometry.fspl_db(300e9, 2.0)
        power_db = 20 * math.log10(abs(path.amplitude))
        assert power_db + 51.0 + extra_loss == pytest.approx(float(model.power_db(delta_phi)))

    # the same coefficients read against the specular level instead of the antenna-inclusive domain
    relative = hybrid.synthesize_hybrid_cir(
        single_wall_scene,
        single_wall_pose,
        attrs.evolve(model, relative_to_specular=True),
        sounder,
    )
    specular_db = -geometry.fspl_db(300e9, 2.0) - 11.4
    assert len(relative.environment) == len(cir.environment)
    for rel, absolute in zip(relative.environment, cir.environment):
        assert 20 * math.log10(abs(rel.amplitude) / abs(absolute.amplitude)) == pytest.approx(
            specular_db + 51.0
        )


def test_synthesize_hybrid_cir_monotone(
    single_wall_scene: geometry.SceneModel,
    single_wall_pose: geometry.TrxPose,
    sounder: geometry.SounderConfig,
) -> None:
    model = hybrid.DiffusePowerModel(15.2, -43.5, relative_to_specular=True)

    cir = hybrid.synthesize_hybrid_cir(single_wall_scene, single_wall_pose, model, sounder)

    right = sorted(
        (path for path in cir.environment if path.azimuth_deg < 90.0),
        key=lambda path: abs(path.azimuth_deg - 90.0),
    )
    powers = [abs(path.amplitude) for path in right]
    assert np.all(np.diff(powers) <= 0)


def test_hybrid_round_trip(
    single_wall_scene: geometry.SceneModel,
    single_wall_pose: geometry.TrxPose,
    sounder: geometry.SounderConfig,
) -> None:
    model = hybrid.DiffusePowerModel(15.2, -43.5, relative_to_specular=True)
    cir = hybrid.synthesize_hybrid_cir(single_wall_scene, single_wall_pose, model, sounder)

    res = hybrid.classify(hybrid.as_deembedded(cir), single_wall_scene, single_wall_pose)

    n_target = len(cir.target)
    assert all(item.label == MpcLabel.TARGET_SPECULAR for item in res[:n_target])
    assert all(item.label == MpcLabel.ENVIRONMENT_DIFFUSE for item in res[n_target:])

    fit = hybrid.fit_diffuse_model(res, relative_to_specular=True)

    # the folded facets move the specular reference away from the bare wall level
    shift_db = 20 * math.log10(abs(cir.target[0].amplitude)) + geometry.fspl_db(300e9, 2.0) + 11.4
    assert fit.n_diff == pytest.approx(15.2, abs=1e-3)
    assert fit.b_diff == pytest.approx(-43.5 - shift_db, abs=1e-3)

    frame = hybrid.classified_to_frame(res)
    assert list(frame.columns) == hybrid.CLASSIFIED_COLUMNS
    assert len(frame) == len(res)


def test_synthesize_hybrid_cir_empty_scene(sounder: geometry.SounderConfig) -> None:
    pose = geometry.TrxPose((0.0, 0.0), 0.2, 1)
    scene = geometry.SceneModel([], [pose])

    cir = hybrid.synthesize_hybrid_cir(scene, pose, hybrid.DiffusePowerModel(10.0, -40.0), sounder)

    assert cir.target == () and cir.environment == ()
    np.testing.assert_array_equal(hybrid.hybrid_response(cir, sounder.freqs_hz()), 0.0)


def test_diffuse_model_json() -> None:
    model = hybrid.DiffusePowerModel(15.2, -43.5, 2.1, True, 40)

    assert hybrid.DiffusePowerModel.from_json(model.to_json()) == model
    assert synthesis.PathOrigin("wall_diffuse") == synthesis.PathOrigin.WALL_DIFFUSE
