"""Forward simulator of directional channel frequency responses."""

from __future__ import annotations

import enum
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import attrs
import numpy as np
import numpy.typing as npt

from . import geometry
from .geometry import C, AntennaPattern, SceneModel, SounderConfig, TrxPose

logger = logging.getLogger(__name__)


class PathOrigin(str, enum.Enum):
    WALL_SPECULAR = "wall_specular"
    WALL_DIFFUSE = "wall_diffuse"
    CORNER_SPECULAR = "corner_specular"
    WINDOW = "window"
    SCATTERER = "scatterer"


def _nonzero(instance: object, attribute: "attrs.Attribute[complex]", value: complex) -> None:
    if not abs(value) > 0:
        raise ValueError(f"{attribute.name} must be nonzero")


def _positive_delay(instance: object, attribute: "attrs.Attribute[float]", value: float) -> None:
    if not value > 0:
        raise ValueError(f"{attribute.name} must be positive, got {value!r}")


@attrs.frozen
class GroundTruthPath:
    """Antenna-free path, ``delay_s`` taken from the phase center at boresight."""

    amplitude: complex = attrs.field(converter=complex, validator=_nonzero)
    delay_s: float = attrs.field(converter=float, validator=_positive_delay)
    azimuth_deg: float = attrs.field(converter=float)
    origin: PathOrigin = attrs.field(default=PathOrigin.WALL_SPECULAR, converter=PathOrigin)
    kind: str = "specular"
    wall_indices: Tuple[int, ...] = attrs.field(default=(), converter=tuple)

    @property
    def power_db(self) -> float:
        return 20.0 * math.log10(abs(self.amplitude))


@attrs.define(eq=False)
class DirectionalCfr:
    pose_index: int
    angles_deg: npt.NDArray[np.float64]
    freqs_hz: npt.NDArray[np.float64]
    data: npt.NDArray[np.complex128]
    truth: Optional[List[GroundTruthPath]] = None
    seed: int = 0
    noise_floor_db: float = -120.0
    pose: Optional[TrxPose] = None

    def __attrs_post_init__(self) -> None:
        expected = (len(self.angles_deg), len(self.freqs_hz))
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape} does not match grids {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"pose {self.pose_index} CFR has non-finite entries")


def antenna_gain_db(pattern: AntennaPattern, offset_deg: npt.ArrayLike) -> npt.NDArray[np.float64]:
    theta = np.asarray(geometry.wrap_deg(offset_deg), dtype=float)
    if math.isinf(pattern.hpbw_deg):
        return np.full(theta.shape, pattern.boresight_gain_dbi)
    main_lobe = pattern.boresight_gain_dbi - 3.0 * (2.0 * theta / pattern.hpbw_deg) ** 2
    return np.maximum(main_lobe, pattern.boresight_gain_dbi + pattern.floor_db)


def pattern_phase_rad(pattern: AntennaPattern, offset_deg: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Synthetic one-way pattern phase, quadratic across the main lobe."""
    theta = np.asarray(geometry.wrap_deg(offset_deg), dtype=float)
    if pattern.phase_ripple_rad == 0.0 or math.isinf(pattern.hpbw_deg):
        return np.zeros(theta.shape)
    return pattern.phase_ripple_rad * (2.0 * theta / pattern.hpbw_deg) ** 2


def rotation_manifold(f: npt.ArrayLike, phi: npt.ArrayLike, r: float) -> npt.NDArray[np.complex128]:
    if r < 0:
        raise ValueError(f"r must be non-negative, got {r}")
    phase = 4.0 * np.pi * np.asarray(f) * r * np.cos(np.radians(phi)) / C
    return np.exp(1j * phase)


def _noise_rng(seed: int, pose_index: int, angle_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, pose_index, angle_index])


def cfr_from_paths(
    paths: Sequence[GroundTruthPath],
    pose: TrxPose,
    cfg: SounderConfig,
    seed: int = 0,
    angles: Optional[npt.ArrayLike] = None,
) -> DirectionalCfr:
    freqs = cfg.freqs_hz()
    angles_deg = cfg.angles_deg() if angles is None else np.asarray(angles, dtype=float)
    data = np.zeros((len(angles_deg), len(freqs)), dtype=complex)
    half_width = cfg.antenna.floor_half_width_deg
    boresight = np.conj(rotation_manifold(freqs, 0.0, pose.azimuth_radius_m))

    amplitudes = np.array([path.amplitude for path in paths], dtype=complex)
    azimuths = np.array([path.azimuth_deg for path in paths], dtype=float)
    if paths:
        delays = np.array([path.delay_s for path in paths])
        phasors = np.exp(-2j * np.pi * freqs[None, :] * delays[:, None])
    for angle_index, phi in enumerate(angles_deg):
        if paths:
            offsets = geometry.wrap_deg(azimuths - phi)
            selected = np.flatnonzero(np.abs(offsets) <= half_width)
            for index in selected:
                two_way = 10.0 ** (
                    2.0 * antenna_gain_db(cfg.antenna, offsets[index]) / 20.0
                ) * np.exp(2j * pattern_phase_rad(cfg.antenna, offsets[index]))
                manifold = rotation_manifold(freqs, -offsets[index], pose.azimuth_radius_m)
                data[angle_index] += (
                    amplitudes[index] * two_way * phasors[index] * (manifold * boresight)
                )
        if cfg.add_noise:
            rng = _noise_rng(seed, pose.pose_index, angle_index)
            sigma = math.sqrt(len(freqs) * 10.0 ** (cfg.noise_floor_db / 10.0) / 2.0)
            data[angle_index] += sigma * (
                rng.standard_normal(len(freqs)) + 1j * rng.standard_normal(len(freqs))
            )
    logger.debug(f"synthesized {len(angles_deg)} rows from {len(paths)} paths")
    return DirectionalCfr(
        pose_index=pose.pose_index,
        angles_deg=angles_deg,
        freqs_hz=freqs,
        data=data,
        truth=list(paths),
        seed=seed,
        noise_floor_db=cfg.noise_floor_db,
        pose=pose,
    )


def _origin_for(path: geometry.GeoPath) -> PathOrigin:
    if path.feature_kind == "corner":
        return PathOrigin.CORNER_SPECULAR
    if path.feature_kind == geometry.WallKind.WINDOW.value:
        return PathOrigin.WINDOW
    if path.feature_kind == geometry.WallKind.SCATTERER_ZONE_BOUNDARY.value:
        return PathOrigin.SCATTERER
    if path.kind == "specular":
        return PathOrigin.WALL_SPECULAR
    return PathOrigin.WALL_DIFFUSE


def facet_phases(scene: SceneModel, seed: int) -> Dict[int, npt.NDArray[np.float64]]:
    """Uniform per-facet phases, drawn in scene order so all poses share them."""
    rng = np.random.default_rng(seed)
    return {
        index: rng.uniform(0.0, 2.0 * np.pi, len(wall.facet_centers()))
        for index, wall in enumerate(scene.walls)
    }


def wall_normal_reference(
    wall: geometry.WallSegment, center: npt.ArrayLike
) -> Tuple[float, float]:
    """Distance ``a`` from ``center`` to the wall line and azimuth of its normal."""
    center = np.asarray(center, dtype=float)
    _, foot = wall.project(center)
    return float(np.linalg.norm(foot - center)), geometry.azimuth_deg(foot - center)


def specular_level_db(f_c: float, a: float, r: float, material: geometry.MaterialSpec) -> float:
    return -geometry.fspl_db(f_c, 2.0 * (a - r)) - material.specular_loss_db


def diffuse_power_db(
    f_c: float,
    a: float,
    r: float,
    distance_m: float,
    delta_phi_deg: float,
    material: geometry.MaterialSpec,
    slope_db: Optional[float] = None,
    intercept_db: Optional[float] = None,
) -> float:
    """Antenna-free power of a facet seen at ``distance_m`` from the rotation center."""
    slope = material.diffuse_slope_db if slope_db is None else slope_db
    intercept = material.diffuse_intercept_db if intercept_db is None else intercept_db
    cos2 = math.cos(math.radians(delta_phi_deg)) ** 2
    extra_loss = geometry.fspl_db(f_c, 2.0 * (distance_m - r)) - geometry.fspl_db(
        f_c, 2.0 * (a - r)
    )
    return specular_level_db(f_c, a, r, material) + slope * cos2 + intercept - extra_loss


def scene_ground_truth(
    scene: SceneModel, pose: TrxPose, cfg: SounderConfig, seed: int = 0
) -> List[GroundTruthPath]:
    center = np.array(pose.center)
    r = pose.azimuth_radius_m
    phases = facet_phases(scene, seed)
    features = geometry.visible_features(scene, center)
    # facets within one delay resolution of their wall's specular return merge into it
    footprint = {
        path.wall_indices[0]: path.distance_m
        for path in features
        if path.kind == "specular" and path.feature_kind != "corner"
    }
    truth = []
    for path in features:
        distance = path.distance_m
        if distance <= r:
            continue
        delay = 2.0 * (distance - r) / C
        if delay > cfg.max_delay_s:
            continue
        if path.kind != "specular" and path.wall_indices[0] in footprint:
            if 2.0 * (distance - footprint[path.wall_indices[0]]) / C < cfg.delay_resolution_s:
                continue
        origin = _origin_for(path)
        if path.feature_kind == "corner":
            loss = sum(scene.walls[i].material.specular_loss_db for i in path.wall_indices)
            power_db = -geometry.fspl_db(cfg.f_c_hz, C * delay) - loss
            phase = 0.0
        elif path.kind == "specular":
            power_db = -geometry.fspl_db(cfg.f_c_hz, C * delay) - path.material.specular_loss_db
            phase = 0.0
        else:
            wall = scene.walls[path.wall_indices[0]]
            a, normal = wall_normal_reference(wall, center)
            if a <= r:
                continue
            delta_phi = geometry.wrap_deg(path.azimuth_deg - normal)
            power_db = diffuse_power_db(cfg.f_c_hz, a, r, distance, delta_phi, wall.material)
            assert path.facet_index is not None
            phase = float(phases[path.wall_indices[0]][path.facet_index])
        truth.append(
            GroundTruthPath(
                amplitude=10.0 ** (power_db / 20.0) * np.exp(1j * phase),
                delay_s=delay,
                azimuth_deg=path.azimuth_deg,
                origin=origin,
                kind=path.kind,
                wall_indices=path.wall_indices,
            )
        )
    logger.debug(f"pose {pose.pose_index}: {len(truth)} ground-truth paths")
    return truth


def synthesize_cfr(
    scene: SceneModel, pose: TrxPose, cfg: SounderConfig, seed: int = 0
) -> DirectionalCfr:
    if pose not in scene.trx_poses:
        raise geometry.SceneError(
            f"pose {pose.pose_index} is not part of scene {scene.name!r}"
        )
    truth = scene_ground_truth(scene, pose, cfg, seed)
    logger.info(f"synthesizing pose {pose.pose_index} with {len(truth)} paths")
    return cfr_from_paths(truth, pose, cfg, seed)
