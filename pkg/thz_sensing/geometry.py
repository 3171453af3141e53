"""Scene representation, exact 2D ray geometry and closed-form delay models.

Conventions: the scene frame is x-right / y-up, azimuths are measured
counter-clockwise from +x in degrees, lengths are in meters and delays in
seconds.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import attrs
import numpy as np
import numpy.typing as npt
from scipy import constants

C = constants.c
FACET_SIZE_M = 0.02
GEOMETRY_EPS = 1e-9

Point = Tuple[float, float]

logger = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


class WallKind(str, enum.Enum):
    WALL = "wall"
    WINDOW = "window"
    SCATTERER_ZONE_BOUNDARY = "scatterer_zone_boundary"


def _to_point(value: Sequence[float]) -> Point:
    x, y = value
    return (float(x), float(y))


def _finite_point(instance: Any, attribute: "attrs.Attribute[Point]", value: Point) -> None:
    if not all(math.isfinite(v) for v in value):
        raise SceneError(f"{attribute.name} must be finite, got {value!r}")


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value!r}")


def wrap_deg(angle: npt.ArrayLike) -> Any:
    """Wrap angles to (-180, 180] degrees."""
    wrapped = -((-np.asarray(angle, dtype=float) + 180.0) % 360.0) + 180.0
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def unit_vector(angle_deg: float) -> npt.NDArray[np.float64]:
    rad = math.radians(angle_deg)
    return np.array([math.cos(rad), math.sin(rad)])


def azimuth_deg(vector: npt.ArrayLike) -> float:
    x, y = np.asarray(vector, dtype=float)
    return math.degrees(math.atan2(y, x)) % 360.0


@attrs.frozen
class MaterialSpec:
    """Scalar reflection properties of a surface.

    The diffuse coefficients are in dB relative to the same feature's
    specular return once free-space loss is normalized to the specular path
    length.
    """

    specular_loss_db: float = attrs.field(
        default=11.4, converter=float, validator=attrs.validators.ge(0.0)
    )
    diffuse_slope_db: float = attrs.field(default=15.2, converter=float)
    diffuse_intercept_db: float = attrs.field(default=-43.5, converter=float)

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> Self:
        return cls(
            specular_loss_db=data["spec_loss_db"],
            diffuse_slope_db=data.get("n_diff", 15.2),
            diffuse_intercept_db=data.get("b_diff", -43.5),
        )

    def to_json(self) -> Dict[str, float]:
        return {
            "spec_loss_db": self.specular_loss_db,
            "n_diff": self.diffuse_slope_db,
            "b_diff": self.diffuse_intercept_db,
        }


CEMENT_WALL = MaterialSpec(11.4, 15.2, -43.5)
METAL_FRAMED_WINDOW = MaterialSpec(2.5, 10.0, -50.0)
DENSE_SCATTERERS = MaterialSpec(20.0, 5.0, -25.0)


@attrs.frozen
class WallSegment:
    p0: Point = attrs.field(converter=_to_point, validator=_finite_point)
    p1: Point = attrs.field(converter=_to_point, validator=_finite_point)
    material: MaterialSpec = attrs.field(factory=MaterialSpec)
    kind: WallKind = attrs.field(default=WallKind.WALL, converter=WallKind)

    def __attrs_post_init__(self) -> None:
        if not self.length > 0.0:
            raise SceneError(f"zero-length wall segment at {self.p0}")

    @property
    def length(self) -> float:
        return math.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1])

    @property
    def start(self) -> npt.NDArray[np.float64]:
        return np.array(self.p0)

    @property
    def end(self) -> npt.NDArray[np.float64]:
        return np.array(self.p1)

    def project(self, point: npt.ArrayLike) -> Tuple[float, npt.NDArray[np.float64]]:
        start, edge = self.start, self.end - self.start
        s = float(np.dot(np.asarray(point, dtype=float) - start, edge) / np.dot(edge, edge))
        return s, start + s * edge

    def facet_centers(self, size: float = FACET_SIZE_M) -> npt.NDArray[np.float64]:
        n = max(1, int(math.ceil(self.length / size - GEOMETRY_EPS)))
        t = (np.arange(n) + 0.5) / n
        return self.start + t[:, None] * (self.end - self.start)

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> Self:
        return cls(
            p0=data["p0"],
            p1=data["p1"],
            material=MaterialSpec.from_json(data.get("material", {"spec_loss_db": 11.4})),
            kind=data.get("kind", "wall"),
        )

    def to_json(self) -> Dict[str, Any]:
        return {
            "p0": list(self.p0),
            "p1": list(self.p1),
            "material": self.material.to_json(),
            "kind": self.kind.value,
        }


@attrs.frozen
class TrxPose:
    center: Point = attrs.field(converter=_to_point, validator=_finite_point)
    azimuth_radius_m: float = attrs.field(
        default=0.2, converter=float, validator=attrs.validators.gt(0.0)
    )
    pose_index: int = 0

    def phase_center(self, phi_deg: float) -> npt.NDArray[np.float64]:
        return np.array(self.center) + self.azimuth_radius_m * unit_vector(phi_deg)


def point_segment_distance(point: npt.ArrayLike, wall: WallSegment) -> float:
    s, _ = wall.project(point)
    closest = wall.start + min(max(s, 0.0), 1.0) * (wall.end - wall.start)
    return float(np.linalg.norm(np.asarray(point, dtype=float) - closest))


@attrs.frozen
class SceneModel:

    walls: Tuple[WallSegment, ...] = attrs.field(converter=tuple)
    trx_poses: Tuple[TrxPose, ...] = attrs.field(converter=tuple, factory=tuple)
    name: str = "scene"

    def __attrs_post_init__(self) -> None:
        for pose in self.trx_poses:
            for index, wall in enumerate(self.walls):
                if point_segment_distance(pose.center, wall) <= GEOMETRY_EPS:
                    raise SceneError(
                        f"pose {pose.pose_index} lies on wall {index} of scene {self.name!r}"
                    )

    def validate(self) -> None:
        if not self.walls:
            raise SceneError(f"scene {self.name!r} has no walls")

    def pose(self, pose_index: int) -> TrxPose:
        for pose in self.trx_poses:
            if pose.pose_index == pose_index:
                return pose
        raise SceneError(f"pose {pose_index} is not part of scene {self.name!r}")

    def with_poses(self, poses: Sequence[TrxPose]) -> Self:
        return attrs.evolve(self, trx_poses=tuple(poses))

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> Self:
        try:
            walls = [WallSegment.from_json(wall) for wall in data["walls"]]
            poses = [
                TrxPose(
                    center=pose["center"],
                    azimuth_radius_m=pose.get("r", 0.2),
                    pose_index=pose.get("index", position + 1),
                )
                for position, pose in enumerate(data.get("trx_poses", []))
            ]
        except KeyError as exc:
            raise SceneError(f"scene is missing field {exc.args[0]!r}") from exc
        scene = cls(walls=walls, trx_poses=poses, name=data.get("name", "scene"))
        scene.validate()
        return scene

    def to_json(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "walls": [wall.to_json() for wall in self.walls],
            "trx_poses": [
                {
                    "center": list(pose.center),
                    "r": pose.azimuth_radius_m,
                    "index": pose.pose_index,
                }
                for pose in self.trx_poses
            ],
        }


def load_scene(path: str) -> SceneModel:
    path = os.path.expanduser(path)
    with open(path) as fin:
        try:
            data = json.load(fin)
        except json.JSONDecodeError:
            raise SceneError(f"failed to parse {path!r} file")
    return SceneModel.from_json(data)


def nearest_wall(scene: SceneModel, point: npt.ArrayLike) -> Tuple[int, float]:
    distances = [point_segment_distance(point, wall) for wall in scene.walls]
    index = int(np.argmin(distances))
    return index, distances[index]


@attrs.frozen
class AntennaPattern:
    boresight_gain_dbi: float = attrs.field(default=25.5, converter=float)
    hpbw_deg: float = attrs.field(
        default=8.0, converter=float, validator=attrs.validators.gt(0.0)
    )
    floor_db: float = attrs.field(
        default=-30.0, converter=float, validator=attrs.validators.lt(0.0)
    )
    # synthetic pattern phase, zero for a real-valued G_TRx
    phase_ripple_rad: float = attrs.field(default=0.0, converter=float)

    @classmethod
    def isotropic(cls) -> Self:
        return cls(boresight_gain_dbi=0.0, hpbw_deg=math.inf, floor_db=-300.0)

    @property
    def floor_half_width_deg(self) -> float:
        return self.hpbw_deg / 2.0 * math.sqrt(-self.floor_db / 3.0)


def _divides_360(instance: Any, attribute: "attrs.Attribute[float]", value: float) -> None:
    if not value > 0 or abs(360.0 / value - round(360.0 / value)) > 1e-9:
        raise ValueError(f"{attribute.name} must divide 360, got {value!r}")


@attrs.frozen
class SounderConfig:
    f_start_hz: float = attrs.field(default=290e9, converter=float)
    f_stop_hz: float = attrs.field(default=310e9, converter=float)
    n_freq: int = attrs.field(default=2001, converter=int, validator=attrs.validators.ge(2))
    f_c_hz: float = attrs.field(default=300e9, converter=float)
    rotation_step_deg: float = attrs.field(default=1.0, converter=float, validator=_divides_360)
    antenna: AntennaPattern = attrs.field(factory=AntennaPattern)
    tx_power_dbm: float = attrs.field(default=10.0, converter=float)
    noise_floor_db: float = attrs.field(default=-120.0, converter=float)
    add_noise: bool = True

    def __attrs_post_init__(self) -> None:
        if not self.f_stop_hz > self.f_start_hz:
            raise ValueError(
                f"f_stop_hz must exceed f_start_hz, got {self.f_start_hz} and {self.f_stop_hz}"
            )

    @property
    def bandwidth_hz(self) -> float:
        return self.f_stop_hz - self.f_start_hz

    @property
    def freq_step_hz(self) -> float:
        return self.bandwidth_hz / (self.n_freq - 1)

    @property
    def delay_resolution_s(self) -> float:
        return 1.0 / self.bandwidth_hz

    @property
    def space_resolution_m(self) -> float:
        return C / self.bandwidth_hz

    @property
    def one_way_resolution_m(self) -> float:
        return C / (2.0 * self.bandwidth_hz)

    @property
    def delay_bin_s(self) -> float:
        return 1.0 / (self.n_freq * self.freq_step_hz)

    @property
    def max_delay_s(self) -> float:
        return 1.0 / self.freq_step_hz

    @property
    def wavelength_m(self) -> float:
        return C / self.f_c_hz

    def freqs_hz(self) -> npt.NDArray[np.float64]:
        return np.linspace(self.f_start_hz, self.f_stop_hz, self.n_freq)

    def angles_deg(self) -> npt.NDArray[np.float64]:
        n_angles = int(round(360.0 / self.rotation_step_deg))
        return np.arange(n_angles) * self.rotation_step_deg

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> Self:
        data = dict(data)
        antenna = AntennaPattern(**data.pop("antenna", {}))
        return cls(antenna=antenna, **data)

    def to_json(self) -> Dict[str, Any]:
        data = attrs.asdict(self, recurse=True)
        return data


# closed-form delay and loss models


def wall_specular_delay(a: float, r: float, phi: float) -> float:
    """Round-trip delay of the flat-wall specular return, wall normal at 90 deg."""
    _check_finite(a=a, r=r, phi=phi)
    if not a > r >= 0:
        raise ValueError(f"expected a > r >= 0, got a={a}, r={r}")
    return 2.0 * (a - r * (1.0 - math.cos(math.radians(phi)))) / C


def wall_diffuse_delay(a: float, r: float, theta: float) -> float:
    """Round-trip delay of diffuse backscatter at ``theta`` from the wall normal."""
    _check_finite(a=a, r=r, theta=theta)
    if abs(theta) >= 90.0:
        raise ValueError(f"theta must lie strictly inside (-90, 90) deg, got {theta}")
    if not a > r:
        raise ValueError(f"expected a > r, got a={a}, r={r}")
    return 2.0 * (a / math.cos(math.radians(theta)) - r) / C


def corner_specular_delay(a: float, r: float, phi: float, phi_spec: float) -> float:
    """Round-trip delay of the corner double bounce, neglecting the inner leg."""
    _check_finite(a=a, r=r, phi=phi, phi_spec=phi_spec)
    if not 0.0 < phi_spec < 90.0:
        raise ValueError(f"phi_spec must lie in (0, 90) deg, got {phi_spec}")
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    sin_spec = math.sin(math.radians(phi_spec))
    return 2.0 * (a / sin_spec - r * math.cos(math.radians(phi))) / C


def fspl_db(f_c: float, d: float) -> float:
    _check_finite(f_c=f_c, d=d)
    if not f_c > 0:
        raise ValueError(f"f_c must be positive, got {f_c}")
    if not d > 0:
        raise ValueError(f"distance must be positive, got {d}")
    return 20.0 * math.log10(4.0 * math.pi * f_c * d / C)


def far_field_distance(aperture_m: float, wavelength_m: float) -> float:
    if not (aperture_m > 0 and wavelength_m > 0):
        raise ValueError(
            f"aperture and wavelength must be positive, got {aperture_m}, {wavelength_m}"
        )
    return 2.0 * aperture_m**2 / wavelength_m


# exact ray geometry


@attrs.frozen
class GeoPath:
    delay_s: float
    azimuth_deg: float
    bounce_points: Tuple[Point, ...]
    kind: str  # "specular" or "diffuse"
    order: int
    wall_indices: Tuple[int, ...]
    feature_kind: str  # a WallKind value or "corner"
    material: MaterialSpec
    facet_index: Optional[int] = None

    @property
    def distance_m(self) -> float:
        return self.delay_s * C / 2.0

    def sort_key(self) -> Tuple[Any, ...]:
        return (self.delay_s, self.azimuth_deg, self.kind, self.bounce_points)


def _occluded(
    origin: npt.NDArray[np.float64],
    targets: npt.NDArray[np.float64],
    scene: SceneModel,
    owners: npt.NDArray[np.int64],
) -> npt.NDArray[np.bool_]:
    """Flag targets whose sight line from ``origin`` crosses a wall they do not sit on."""
    d = targets - origin
    blocked = np.zeros(len(targets), dtype=bool)
    for index, wall in enumerate(scene.walls):
        edge = wall.end - wall.start
        w = wall.start - origin
        denom = d[:, 0] * edge[1] - d[:, 1] * edge[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[0] * edge[1] - w[1] * edge[0]) / denom
            s = (w[0] * d[:, 1] - w[1] * d[:, 0]) / denom
        hit = (
            (np.abs(denom) > 1e-15)
            & (t > GEOMETRY_EPS)
            & (t < 1.0 - GEOMETRY_EPS)
            & (s >= -GEOMETRY_EPS)
            & (s <= 1.0 + GEOMETRY_EPS)
        )
        hit &= np.all(owners != index, axis=1)
        blocked |= hit
    return blocked


def right_angle_corners(scene: SceneModel) -> List[Tuple[int, int, Point]]:
    """Wall pairs meeting at a shared endpoint at 90 degrees."""
    corners = []
    for i, wall_a in enumerate(scene.walls):
        for j in range(i + 1, len(scene.walls)):
            wall_b = scene.walls[j]
            for end_a, far_a in ((wall_a.p0, wall_a.p1), (wall_a.p1, wall_a.p0)):
                for end_b, far_b in ((wall_b.p0, wall_b.p1), (wall_b.p1, wall_b.p0)):
                    if math.dist(end_a, end_b) > GEOMETRY_EPS:
                        continue
                    dir_a = np.subtract(far_a, end_a) / wall_a.length
                    dir_b = np.subtract(far_b, end_b) / wall_b.length
                    if abs(float(np.dot(dir_a, dir_b))) < 1e-6:
                        corners.append((i, j, end_a))
    return corners


def _inside_wedge(origin: npt.NDArray[np.float64], scene: SceneModel, i: int, j: int, vertex: Point) -> bool:
    v = np.array(vertex)
    dirs = []
    for index in (i, j):
        wall = scene.walls[index]
        far = wall.end if math.dist(wall.p0, vertex) <= GEOMETRY_EPS else wall.start
        dirs.append(far - v)
    lam, mu = np.linalg.solve(np.column_stack(dirs), origin - v)
    return bool(lam > 0 and mu > 0)


def visible_features(
    scene: SceneModel,
    origin: npt.ArrayLike,
    max_order: int = 2,
    facet_size: float = FACET_SIZE_M,
    include_facets: bool = True,
) -> List[GeoPath]:
    """All monostatic returns seen from ``origin`` regardless of antenna pointing.

    First-order specular returns use the foot of the perpendicular, the
    second-order return is the retro-reflection of right-angle corners
    through their vertex, and diffuse returns come from facets of
    ``facet_size``.
    """
    if max_order not in (1, 2):
        raise ValueError(f"max_order must be 1 or 2, got {max_order}")
    origin = np.asarray(origin, dtype=float)
    paths: List[GeoPath] = []

    targets, owners, records = [], [], []
    for index, wall in enumerate(scene.walls):
        s, foot = wall.project(origin)
        if -GEOMETRY_EPS <= s <= 1.0 + GEOMETRY_EPS:
            targets.append(foot)
            owners.append((index, index))
            records.append(("specular", index, None))
        if not include_facets:
            continue
        for facet_index, center in enumerate(wall.facet_centers(facet_size)):
            targets.append(center)
            owners.append((index, index))
            records.append(("diffuse", index, facet_index))
    if max_order == 2:
        for i, j, vertex in right_angle_corners(scene):
            if _inside_wedge(origin, scene, i, j, vertex):
                targets.append(np.array(vertex))
                owners.append((i, j))
                records.append(("corner", i, j))
    if not targets:
        return paths

    target_array = np.array(targets)
    blocked = _occluded(origin, target_array, scene, np.array(owners))
    for target, is_blocked, (kind, first, extra) in zip(target_array, blocked, records):
        distance = float(np.linalg.norm(target - origin))
        if is_blocked or distance <= GEOMETRY_EPS:
            continue
        point = (float(target[0]), float(target[1]))
        wall = scene.walls[first]
        if kind == "corner":
            assert extra is not None
            paths.append(
                GeoPath(
                    delay_s=2.0 * distance / C,
                    azimuth_deg=azimuth_deg(target - origin),
                    bounce_points=(point, point),
                    kind="specular",
                    order=2,
                    wall_indices=(first, extra),
                    feature_kind="corner",
                    material=wall.material,
                )
            )
        else:
            paths.append(
                GeoPath(
                    delay_s=2.0 * distance / C,
                    azimuth_deg=azimuth_deg(target - origin),
                    bounce_points=(point,),
                    kind=kind,
                    order=1,
                    wall_indices=(first,),
                    feature_kind=wall.kind.value,
                    material=wall.material,
                    facet_index=extra,
                )
            )
    paths.sort(key=GeoPath.sort_key)
    return paths


def trace_paths(
    scene: SceneModel,
    pose: TrxPose,
    phi: float,
    max_order: int = 2,
    pattern: Optional[AntennaPattern] = None,
) -> List[GeoPath]:
    """Exact monostatic paths from the phase center with the beam at ``phi``."""
    pattern = pattern or AntennaPattern()
    origin = pose.phase_center(phi)
    half_width = pattern.floor_half_width_deg
    paths = [
        path
        for path in visible_features(scene, origin, max_order=max_order)
        if path.kind == "specular" or abs(wrap_deg(path.azimuth_deg - phi)) <= half_width
    ]
    logger.debug(f"traced {len(paths)} paths at {phi} deg from pose {pose.pose_index}")
    return paths


def polyline(
    points: Sequence[Point], material: MaterialSpec, kind: WallKind = WallKind.WALL
) -> List[WallSegment]:
    return [
        WallSegment(p0, p1, material=material, kind=kind)
        for p0, p1 in zip(points[:-1], points[1:])
    ]


def default_l_scene(radius_m: float = 0.2) -> SceneModel:
    """Indoor laboratory with an L-shaped empty area and 28 poses on an L route.

    Pose 14 sits at the bend of the route and is the coordinate origin; all
    route poses are 1.2 m from the left and bottom walls. The bottom wall
    carries two metal-framed windows, the inner edge of the L borders the
    dense-scatterer areas.
    """
    walls = []
    walls += polyline([(-1.2, -1.2), (1.5, -1.2)], CEMENT_WALL)
    walls += polyline([(1.5, -1.2), (3.0, -1.2)], METAL_FRAMED_WINDOW, WallKind.WINDOW)
    walls += polyline([(3.0, -1.2), (4.5, -1.2)], CEMENT_WALL)
    walls += polyline([(4.5, -1.2), (6.0, -1.2)], METAL_FRAMED_WINDOW, WallKind.WINDOW)
    walls += polyline([(6.0, -1.2), (8.5, -1.2), (8.5, 2.0)], CEMENT_WALL)
    walls += polyline(
        [(8.5, 2.0), (2.0, 2.0), (2.0, 8.0)],
        DENSE_SCATTERERS,
        WallKind.SCATTERER_ZONE_BOUNDARY,
    )
    walls += polyline([(2.0, 8.0), (-1.2, 8.0), (-1.2, -1.2)], CEMENT_WALL)
    poses = [TrxPose((0.0, (14 - m) * 0.5), radius_m, m) for m in range(1, 15)]
    poses += [TrxPose(((m - 14) * 0.5, 0.0), radius_m, m) for m in range(15, 29)]
    return SceneModel(walls=walls, trx_poses=poses, name="l-shaped-lab")
