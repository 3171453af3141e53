"""Target/environment split of de-embedded MPCs and the hybrid CIR model."""

from __future__ import annotations

import enum
import logging
import math
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import attrs
import numpy as np
import numpy.typing as npt
import pandas as pd

from . import geometry, synthesis
from .geometry import C, SceneModel, SounderConfig, TrxPose
from .tracking import DeembeddedMpc

logger = logging.getLogger(__name__)

DELAY_BIN_S = 0.05e-9
SECTOR_STEP_DEG = 0.1

CLASSIFIED_COLUMNS = [
    "id",
    "azimuth_deg",
    "delay_ns",
    "power_db",
    "label",
    "feature_kind",
    "wall_indices",
    "delta_phi_deg",
    "compensated_power_db",
]


class NumericalError(RuntimeError):
    pass


class MpcLabel(str, enum.Enum):
    TARGET_SPECULAR = "target_specular"
    ENVIRONMENT_DIFFUSE = "environment_diffuse"
    UNMATCHED = "unmatched"


@attrs.frozen
class FeatureRef:
    kind: str
    wall_indices: Tuple[int, ...] = attrs.field(converter=tuple)

    def __str__(self) -> str:
        return f"{self.kind}:{'-'.join(str(index) for index in self.wall_indices)}"


@attrs.frozen
class ClassifiedMpc:
    mpc: DeembeddedMpc
    label: MpcLabel = attrs.field(converter=MpcLabel)
    matched_feature: Optional[FeatureRef] = None
    delta_phi_deg: Optional[float] = None
    compensated_power_db: Optional[float] = None
    reference_delay_s: Optional[float] = None

    def __attrs_post_init__(self) -> None:
        if (self.label == MpcLabel.UNMATCHED) != (self.matched_feature is None):
            raise ValueError("only unmatched MPCs may lack a matched feature")


@attrs.frozen
class DiffusePowerModel:
    n_diff: float
    b_diff: float
    rmse: float = attrs.field(default=0.0, validator=attrs.validators.ge(0.0))
    relative_to_specular: bool = False
    n_samples: int = 0

    def power_db(self, delta_phi_deg: npt.ArrayLike) -> npt.NDArray[np.float64]:
        return self.n_diff * np.cos(np.radians(delta_phi_deg)) ** 2 + self.b_diff

    def to_json(self) -> Dict[str, Any]:
        return attrs.asdict(self)

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> DiffusePowerModel:
        return cls(**data)


@attrs.frozen
class HybridPath:
    amplitude: complex
    delay_s: float
    azimuth_deg: float
    feature: FeatureRef


@attrs.frozen
class HybridCir:
    target: Tuple[HybridPath, ...] = attrs.field(converter=tuple)
    environment: Tuple[HybridPath, ...] = attrs.field(converter=tuple)
    pose_index: int = 0


@attrs.frozen
class SpecularConsistency:
    powers_db: Dict[int, float]
    missing: Tuple[int, ...]
    outliers: Tuple[int, ...]
    min_db: Optional[float]
    max_db: Optional[float]
    range_db: Optional[float]
    range_without_outliers_db: Optional[float]

    def to_json(self) -> Dict[str, Any]:
        data = attrs.asdict(self)
        data["powers_db"] = {str(key): value for key, value in self.powers_db.items()}
        data["missing"] = list(self.missing)
        data["outliers"] = list(self.outliers)
        return data


def _feature_ref(path: geometry.GeoPath) -> FeatureRef:
    return FeatureRef(path.feature_kind, path.wall_indices)


def _specular_match(
    scene: SceneModel,
    pose: TrxPose,
    azimuth: float,
    delay_s: float,
    tol_delay_s: float,
    tol_angle_deg: float,
) -> Optional[geometry.GeoPath]:
    best: Optional[Tuple[float, geometry.GeoPath]] = None
    origin = pose.phase_center(azimuth)
    for path in geometry.visible_features(scene, origin, include_facets=False):
        if path.kind != "specular":
            continue
        delay_error = abs(path.delay_s - delay_s)
        angle_error = abs(geometry.wrap_deg(path.azimuth_deg - azimuth))
        if delay_error <= tol_delay_s and angle_error <= tol_angle_deg:
            if best is None or delay_error < best[0]:
                best = (delay_error, path)
    return None if best is None else best[1]


def _ray_hits(
    scene: SceneModel, origin: npt.NDArray[np.float64], azimuth: float
) -> Optional[Tuple[int, npt.NDArray[np.float64]]]:
    """First wall hit by the ray leaving ``origin`` at ``azimuth``."""
    direction = geometry.unit_vector(azimuth)
    nearest: Optional[Tuple[float, int]] = None
    for index, wall in enumerate(scene.walls):
        edge = wall.end - wall.start
        denom = direction[0] * edge[1] - direction[1] * edge[0]
        if abs(denom) < 1e-15:
            continue
        w = wall.start - origin
        t = (w[0] * edge[1] - w[1] * edge[0]) / denom
        s = (w[0] * direction[1] - w[1] * direction[0]) / denom
        eps = geometry.GEOMETRY_EPS
        if t > eps and -eps <= s <= 1.0 + eps and (nearest is None or t < nearest[0]):
            nearest = (t, index)
    if nearest is None:
        return None
    return nearest[1], origin + nearest[0] * direction


def _diffuse_match(
    scene: SceneModel,
    pose: TrxPose,
    azimuth: float,
    delay_s: float,
    tol_delay_s: float,
    tol_angle_deg: float,
) -> Optional[Tuple[int, npt.NDArray[np.float64]]]:
    """Wall and scatter point on the diffuse manifold closest to the MPC delay."""
    n_steps = int(round(tol_angle_deg / SECTOR_STEP_DEG))
    samples: Dict[int, List[Tuple[float, float, npt.NDArray[np.float64]]]] = {}
    for k in range(-n_steps, n_steps + 1):
        psi = azimuth + k * SECTOR_STEP_DEG
        origin = pose.phase_center(psi)
        hit = _ray_hits(scene, origin, psi)
        if hit is None:
            continue
        index, point = hit
        delay = 2.0 * float(np.linalg.norm(point - origin)) / C
        samples.setdefault(index, []).append((delay, abs(k * SECTOR_STEP_DEG), point))
    best: Optional[Tuple[float, float, int, npt.NDArray[np.float64]]] = None
    for index, wall_samples in samples.items():
        delays = [delay for delay, _, _ in wall_samples]
        if not min(delays) - tol_delay_s <= delay_s <= max(delays) + tol_delay_s:
            continue
        delay, offset, point = min(
            wall_samples, key=lambda sample: (abs(sample[0] - delay_s), sample[1])
        )
        key = (abs(delay - delay_s), offset, index, point)
        if best is None or key[:3] < best[:3]:
            best = key
    return None if best is None else (best[2], best[3])


def _reference_delay(wall: geometry.WallSegment, pose: TrxPose) -> Tuple[float, float]:
    a, normal = synthesis.wall_normal_reference(wall, pose.center)
    return 2.0 * (a - pose.azimuth_radius_m) / C, normal


def _compensate(power_db: float, delay_s: float, reference_delay_s: float, f_c: float) -> float:
    return power_db + geometry.fspl_db(f_c, C * delay_s) - geometry.fspl_db(f_c, C * reference_delay_s)


def classify(
    deembedded: Sequence[DeembeddedMpc],
    scene: SceneModel,
    pose: TrxPose,
    tol_delay_bins: float = 2.0,
    tol_angle_deg: float = 3.0,
    delay_bin_s: float = DELAY_BIN_S,
    f_c: float = 300e9,
) -> List[ClassifiedMpc]:
    """Label each MPC as target specular, environment diffuse or unmatched.

    Specular matches take precedence. Diffuse matches record the offset of
    the scatter point from the wall normal, both seen from the rotation
    center, and a power compensated to the wall's specular path length.
    """
    tol_delay_s = tol_delay_bins * delay_bin_s
    classified = []
    for mpc in deembedded:
        specular = _specular_match(scene, pose, mpc.azimuth_deg, mpc.delay_s, tol_delay_s, tol_angle_deg)
        if specular is not None:
            if specular.feature_kind == "corner" or mpc.delay_s <= 0:
                reference = mpc.delay_s
            else:
                reference, _ = _reference_delay(scene.walls[specular.wall_indices[0]], pose)
            compensated = (
                _compensate(mpc.power_db, mpc.delay_s, reference, f_c)
                if mpc.delay_s > 0 and reference > 0
                else mpc.power_db
            )
            classified.append(
                ClassifiedMpc(
                    mpc=mpc,
                    label=MpcLabel.TARGET_SPECULAR,
                    matched_feature=_feature_ref(specular),
                    delta_phi_deg=0.0,
                    compensated_power_db=compensated,
                    reference_delay_s=reference,
                )
            )
            continue
        diffuse = _diffuse_match(scene, pose, mpc.azimuth_deg, mpc.delay_s, tol_delay_s, tol_angle_deg)
        if diffuse is None or mpc.delay_s <= 0:
            classified.append(ClassifiedMpc(mpc=mpc, label=MpcLabel.UNMATCHED))
            continue
        index, point = diffuse
        wall = scene.walls[index]
        reference, normal = _reference_delay(wall, pose)
        delta_phi = geometry.wrap_deg(
            geometry.azimuth_deg(point - np.array(pose.center)) - normal
        )
        classified.append(
            ClassifiedMpc(
                mpc=mpc,
                label=MpcLabel.ENVIRONMENT_DIFFUSE,
                matched_feature=FeatureRef(wall.kind.value, (index,)),
                delta_phi_deg=float(delta_phi),
                compensated_power_db=_compensate(mpc.power_db, mpc.delay_s, reference, f_c)
                if reference > 0
                else mpc.power_db,
                reference_delay_s=reference,
            )
        )
    counts = {label: sum(c.label == label for c in classified) for label in MpcLabel}
    logger.debug(f"pose {pose.pose_index}: {', '.join(f'{k.value}={v}' for k, v in counts.items())}")
    return classified


def fit_diffuse_model(
    classified: Sequence[ClassifiedMpc], relative_to_specular: bool = False
) -> DiffusePowerModel:
    """Ordinary least squares of diffuse power in dB on cos^2 of the angle offset."""
    references: Dict[Tuple[int, ...], float] = {}
    if relative_to_specular:
        for item in classified:
            if (
                item.label == MpcLabel.TARGET_SPECULAR
                and item.matched_feature is not None
                and item.matched_feature.kind != "corner"
                and item.compensated_power_db is not None
            ):
                key = item.matched_feature.wall_indices
                references[key] = max(references.get(key, -math.inf), item.compensated_power_db)
    cos2, powers = [], []
    for item in classified:
        if item.label != MpcLabel.ENVIRONMENT_DIFFUSE:
            continue
        assert item.delta_phi_deg is not None and item.compensated_power_db is not None
        assert item.matched_feature is not None
        power = item.compensated_power_db
        if relative_to_specular:
            reference = references.get(item.matched_feature.wall_indices)
            if reference is None:
                continue
            power -= reference
        cos2.append(math.cos(math.radians(item.delta_phi_deg)) ** 2)
        powers.append(power)
    x, y = np.array(cos2), np.array(powers)
    if len(x) < 2 or np.ptp(x) < 1e-12:
        raise NumericalError(
            f"diffuse fit needs two distinct cos^2 values, got {len(x)} samples"
        )
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - design @ np.array([slope, intercept])
    model = DiffusePowerModel(
        n_diff=float(slope),
        b_diff=float(intercept),
        rmse=float(np.sqrt(np.mean(residual**2))),
        relative_to_specular=relative_to_specular,
        n_samples=len(x),
    )
    logger.info(
        f"diffuse fit over {len(x)} MPCs: {model.n_diff:.2f} cos^2 + {model.b_diff:.2f}, "
        f"rmse {model.rmse:.2f} dB"
    )
    return model


def specular_power_consistency(
    deembedded_per_pose: Mapping[int, Sequence[DeembeddedMpc]],
    scene: SceneModel,
    wall_index: Optional[int] = None,
    outlier_margin_db: float = 3.0,
    **classify_kwargs: Any,
) -> SpecularConsistency:
    """Strongest specular power of one wall per pose and its spread across poses.

    Each pose uses ``wall_index`` when given, else the wall nearest to it.
    """
    powers: Dict[int, float] = {}
    missing = []
    for pose_index in sorted(deembedded_per_pose):
        pose = scene.pose(pose_index)
        target = wall_index if wall_index is not None else geometry.nearest_wall(scene, pose.center)[0]
        matches = [
            item.mpc.power_db
            for item in classify(deembedded_per_pose[pose_index], scene, pose, **classify_kwargs)
            if item.label == MpcLabel.TARGET_SPECULAR
            and item.matched_feature is not None
            and item.matched_feature.kind != "corner"
            and item.matched_feature.wall_indices == (target,)
        ]
        if matches:
            powers[pose_index] = max(matches)
        else:
            logger.warning(f"pose {pose_index}: no specular return from wall {target}")
            missing.append(pose_index)
    if not powers:
        return SpecularConsistency({}, tuple(missing), (), None, None, None, None)
    values = np.array(list(powers.values()))
    median = float(np.median(values))
    outliers = tuple(m for m, p in powers.items() if p > median + outlier_margin_db)
    inliers = np.array([p for m, p in powers.items() if m not in outliers])
    return SpecularConsistency(
        powers_db=powers,
        missing=tuple(missing),
        outliers=outliers,
        min_db=float(values.min()),
        max_db=float(values.max()),
        range_db=float(np.ptp(values)),
        range_without_outliers_db=float(np.ptp(inliers)) if inliers.size else None,
    )


def synthesize_hybrid_cir(
    scene: SceneModel,
    pose: TrxPose,
    model: DiffusePowerModel,
    cfg: SounderConfig = SounderConfig(),
    seed: int = 0,
    tol_delay_bins: float = 2.0,
    tol_angle_deg: float = 3.0,
) -> HybridCir:
    """Specular target part plus diffuse environment part for one pose.

    A relative model is read against each feature's specular level. An
    absolute model is in the de-embedded domain, so the two-way boresight
    gain is taken out. Facets that would be classified as specular are
    added onto the matching target path.
    """
    center = np.array(pose.center)
    r = pose.azimuth_radius_m
    tol_delay_s = tol_delay_bins * cfg.delay_resolution_s
    phases = synthesis.facet_phases(scene, seed)
    features = geometry.visible_features(scene, center)
    target: Dict[FeatureRef, HybridPath] = {}
    for path in features:
        if path.kind != "specular" or path.distance_m <= r:
            continue
        delay = 2.0 * (path.distance_m - r) / C
        loss = sum(scene.walls[i].material.specular_loss_db for i in set(path.wall_indices))
        power_db = -geometry.fspl_db(cfg.f_c_hz, C * delay) - loss
        feature = _feature_ref(path)
        target[feature] = HybridPath(10.0 ** (power_db / 20.0), delay, path.azimuth_deg, feature)
    environment, folded = [], 0
    for path in features:
        if path.kind == "specular" or path.distance_m <= r:
            continue
        delay = 2.0 * (path.distance_m - r) / C
        wall = scene.walls[path.wall_indices[0]]
        a, normal = synthesis.wall_normal_reference(wall, center)
        if a <= r:
            continue
        delta_phi = geometry.wrap_deg(path.azimuth_deg - normal)
        if model.relative_to_specular:
            power_db = synthesis.diffuse_power_db(
                cfg.f_c_hz,
                a,
                r,
                path.distance_m,
                delta_phi,
                wall.material,
                slope_db=model.n_diff,
                intercept_db=model.b_diff,
            )
        else:
            extra_loss = geometry.fspl_db(cfg.f_c_hz, 2.0 * (path.distance_m - r)) - geometry.fspl_db(
                cfg.f_c_hz, 2.0 * (a - r)
            )
            power_db = (
                float(model.power_db(delta_phi)) - 2.0 * cfg.antenna.boresight_gain_dbi - extra_loss
            )
        assert path.facet_index is not None
        amplitude = 10.0 ** (power_db / 20.0) * np.exp(1j * phases[path.wall_indices[0]][path.facet_index])
        specular = _specular_match(scene, pose, path.azimuth_deg, delay, tol_delay_s, tol_angle_deg)
        if specular is not None and _feature_ref(specular) in target:
            owner = target[_feature_ref(specular)]
            target[owner.feature] = attrs.evolve(owner, amplitude=owner.amplitude + amplitude)
            folded += 1
            continue
        environment.append(
            HybridPath(amplitude, delay, path.azimuth_deg, FeatureRef(wall.kind.value, path.wall_indices))
        )
    logger.debug(
        f"hybrid CIR: {len(target)} target and {len(environment)} environment paths, "
        f"{folded} facets folded into targets"
    )
    return HybridCir(target=list(target.values()), environment=environment, pose_index=pose.pose_index)


def _response(paths: Sequence[HybridPath], freqs: npt.NDArray[np.float64]) -> npt.NDArray[np.complex128]:
    if not paths:
        return np.zeros(len(freqs), dtype=complex)
    amplitudes = np.array([path.amplitude for path in paths], dtype=complex)
    delays = np.array([path.delay_s for path in paths])
    return np.exp(-2j * np.pi * freqs[:, None] * delays[None, :]) @ amplitudes


def hybrid_response(cir: HybridCir, freqs: npt.ArrayLike, part: str = "all") -> npt.NDArray[np.complex128]:
    freqs = np.asarray(freqs, dtype=float)
    if part == "target":
        return _response(cir.target, freqs)
    if part == "environment":
        return _response(cir.environment, freqs)
    if part == "all":
        return _response(cir.target, freqs) + _response(cir.environment, freqs)
    raise ValueError(f"unknown part {part!r}, expected all, target or environment")


def as_deembedded(cir: HybridCir) -> List[DeembeddedMpc]:
    return [
        DeembeddedMpc(path.amplitude, path.delay_s, path.azimuth_deg, number)
        for number, path in enumerate(cir.target + cir.environment)
    ]


def classified_to_frame(classified: Sequence[ClassifiedMpc]) -> pd.DataFrame:
    records = [
        (
            item.mpc.source_trajectory_id,
            item.mpc.azimuth_deg,
            item.mpc.delay_s * 1e9,
            item.mpc.power_db,
            item.label.value,
            item.matched_feature.kind if item.matched_feature else "",
            "-".join(map(str, item.matched_feature.wall_indices)) if item.matched_feature else "",
            item.delta_phi_deg,
            item.compensated_power_db,
        )
        for item in classified
    ]
    return pd.DataFrame.from_records(records, columns=CLASSIFIED_COLUMNS)
