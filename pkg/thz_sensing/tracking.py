"""MPC trajectory tracking across rotation angles and max-power de-embedding."""

from __future__ import annotations

import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import attrs
import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy import optimize

from . import geometry
from .geometry import C, SceneModel, TrxPose
from .sage import EstimateSet, MpcEstimate

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6
INFEASIBLE = 1e12

Node = Tuple[int, int]
Member = Tuple[float, MpcEstimate]

TRAJECTORY_COLUMNS = ["trajectory_id", "angle_deg", "delay_ns", "power_db", "phase_rad"]
DEEMBEDDED_COLUMNS = ["id", "azimuth_deg", "delay_ns", "power_db", "phase_rad"]


class CalibrationError(RuntimeError):
    pass


def _positive(instance: Any, attribute: "attrs.Attribute[Any]", value: Any) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"{attribute.name} must be positive and finite, got {value!r}")


@attrs.frozen
class Trajectory:
    id: int
    members: Tuple[Member, ...] = attrs.field(converter=tuple)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def angles_deg(self) -> npt.NDArray[np.float64]:
        return np.array([angle for angle, _ in self.members])

    @property
    def delays_s(self) -> npt.NDArray[np.float64]:
        return np.array([mpc.delay_s for _, mpc in self.members])

    @property
    def powers_db(self) -> npt.NDArray[np.float64]:
        return np.array([mpc.power_db for _, mpc in self.members])

    @property
    def mean_power_db(self) -> float:
        return float(np.mean(self.powers_db))


@attrs.frozen
class McdWeights:
    w_power: float = attrs.field(default=1.0, validator=_positive)
    w_delay: float = attrs.field(default=1.0, validator=_positive)
    s_power: float = 1.0
    s_delay: float = 1.0
    reference_mcd_median: Optional[float] = None


@attrs.frozen
class DeembeddedMpc:
    amplitude: complex = attrs.field(converter=complex)
    delay_s: float = attrs.field(converter=float)
    azimuth_deg: float = attrs.field(converter=float)
    source_trajectory_id: int = 0

    @property
    def power_db(self) -> float:
        magnitude = abs(self.amplitude)
        return 20.0 * math.log10(magnitude) if magnitude > 0 else -math.inf

    @property
    def phase_rad(self) -> float:
        return math.atan2(self.amplitude.imag, self.amplitude.real)


@attrs.frozen
class TrackerConfig:
    delay_gate_s: float = attrs.field(default=0.02e-9, converter=float, validator=_positive)
    mcd_gate_multiplier: float = attrs.field(default=3.0, converter=float, validator=_positive)
    min_track_len: int = attrs.field(default=3, converter=int, validator=_positive)
    assignment: str = attrs.field(
        default="greedy", validator=attrs.validators.in_(["greedy", "optimal"])
    )
    refine_azimuth: bool = attrs.field(default=True, converter=bool)


def mcd(a: MpcEstimate, b: MpcEstimate, w: McdWeights) -> float:
    delta_p = abs(a.power_db - b.power_db)
    delta_tau_ns = abs(a.delay_s - b.delay_s) * 1e9
    return math.sqrt(w.w_power * delta_p**2 + w.w_delay * delta_tau_ns**2)


def _mcd_matrix(
    left: Sequence[MpcEstimate], right: Sequence[MpcEstimate], w: McdWeights
) -> npt.NDArray[np.float64]:
    p_left = np.array([mpc.power_db for mpc in left])
    p_right = np.array([mpc.power_db for mpc in right])
    t_left = np.array([mpc.delay_s for mpc in left]) * 1e9
    t_right = np.array([mpc.delay_s for mpc in right]) * 1e9
    return np.sqrt(
        w.w_power * (p_left[:, None] - p_right[None, :]) ** 2
        + w.w_delay * (t_left[:, None] - t_right[None, :]) ** 2
    )


def _delay_gaps(
    left: Sequence[MpcEstimate], right: Sequence[MpcEstimate]
) -> npt.NDArray[np.float64]:
    t_left = np.array([mpc.delay_s for mpc in left])
    t_right = np.array([mpc.delay_s for mpc in right])
    return np.abs(t_left[:, None] - t_right[None, :])


def _adjacent_pairs(est: EstimateSet) -> List[Tuple[int, int]]:
    """Index pairs of neighbouring angles, closing the seam on a full circle."""
    angles = est.angles_deg
    n = len(angles)
    pairs = [(i, i + 1) for i in range(n - 1)]
    if n > 2:
        step = float(angles[1] - angles[0])
        if math.isclose((angles[-1] + step) % 360.0, angles[0] % 360.0, abs_tol=1e-6):
            pairs.append((n - 1, 0))
    return pairs


def _assign(
    cost: npt.NDArray[np.float64], feasible: npt.NDArray[np.bool_], method: str
) -> List[Tuple[int, int]]:
    if not feasible.any():
        return []
    if method == "optimal":
        rows, cols = optimize.linear_sum_assignment(np.where(feasible, cost, INFEASIBLE))
        return [(i, j) for i, j in zip(rows, cols) if feasible[i, j]]
    candidates = sorted(
        (float(cost[i, j]), int(i), int(j)) for i, j in zip(*np.nonzero(feasible))
    )
    used_left, used_right, links = set(), set(), []
    for _, i, j in candidates:
        if i in used_left or j in used_right:
            continue
        used_left.add(i)
        used_right.add(j)
        links.append((i, j))
    return links


CostFunction = Callable[
    [Sequence[MpcEstimate], Sequence[MpcEstimate]], npt.NDArray[np.float64]
]


def _link(
    est: EstimateSet,
    cost_fn: CostFunction,
    delay_gate_s: float,
    cost_gate: Optional[float] = None,
    method: str = "greedy",
) -> Dict[Node, Node]:
    successors: Dict[Node, Node] = {}
    for i, j in _adjacent_pairs(est):
        left, right = est.angles[i].mpcs, est.angles[j].mpcs
        if not left or not right:
            continue
        cost = cost_fn(left, right)
        feasible = _delay_gaps(left, right) <= delay_gate_s
        if cost_gate is not None:
            feasible &= cost <= cost_gate
        links = _assign(cost, feasible, method)
        logger.debug(
            f"linked {len(links)} pairs between {est.angles[i].angle_deg} and "
            f"{est.angles[j].angle_deg} deg"
        )
        for a, b in links:
            successors[(i, a)] = (j, b)
    return successors


def _chains(est: EstimateSet, successors: Dict[Node, Node]) -> List[List[Node]]:
    has_predecessor = set(successors.values())
    nodes = [
        (i, k) for i, angle in enumerate(est.angles) for k in range(len(angle.mpcs))
    ]
    visited: set[Node] = set()
    chains = []
    heads = [node for node in nodes if node not in has_predecessor]
    # rings that wrap the whole circle have no head; break them at the lowest angle
    heads += [node for node in nodes if node in has_predecessor]
    for head in heads:
        if head in visited:
            continue
        chain = [head]
        visited.add(head)
        node = head
        while node in successors and successors[node] not in visited:
            node = successors[node]
            chain.append(node)
            visited.add(node)
        chains.append(chain)
    return chains


def _to_trajectories(
    est: EstimateSet, chains: List[List[Node]], min_len: int
) -> List[Trajectory]:
    kept = [chain for chain in chains if len(chain) >= min_len]
    kept.sort(
        key=lambda chain: (
            est.angles[chain[0][0]].angle_deg,
            est.angles[chain[0][0]].mpcs[chain[0][1]].delay_s,
        )
    )
    return [
        Trajectory(
            id=number,
            members=[(est.angles[i].angle_deg, est.angles[i].mpcs[k]) for i, k in chain],
        )
        for number, chain in enumerate(kept)
    ]


def specular_delay_model(
    angles_deg: npt.ArrayLike, a: float, r: float, normal_deg: float
) -> npt.NDArray[np.float64]:
    offsets = np.radians(np.asarray(angles_deg, dtype=float) - normal_deg)
    return 2.0 * (a - r * np.cos(offsets)) / C


def _fit_wall(
    traj: Trajectory, r: float, normal_deg: float
) -> Tuple[float, float]:
    """Least-squares wall distance and RMS delay residual of a chain."""
    angles = traj.angles_deg
    a = float(np.mean(C * traj.delays_s / 2.0 + r * np.cos(np.radians(angles - normal_deg))))
    residual = traj.delays_s - specular_delay_model(angles, a, r, normal_deg)
    return a, float(np.sqrt(np.mean(residual**2)))


def _spans(traj: Trajectory, azimuth: float, step: float) -> bool:
    offsets = np.abs(geometry.wrap_deg(traj.angles_deg - azimuth))
    return bool(np.min(offsets) <= step / 2.0 + 1e-9)


def find_specular_reference(
    est: EstimateSet,
    scene: SceneModel,
    pose: TrxPose,
    delay_gate_s: float = 0.02e-9,
    delay_bin_s: float = 0.05e-9,
    min_len: int = 3,
) -> Trajectory:
    """Longest delay-gated chain that follows a visible wall's specular model."""
    center = np.array(pose.center)
    normals = [
        (path.azimuth_deg, path.wall_indices[0])
        for path in geometry.visible_features(scene, center, max_order=1, include_facets=False)
        if path.kind == "specular"
    ]
    angles = est.angles_deg
    step = float(angles[1] - angles[0]) if len(angles) > 1 else 1.0

    def delay_cost(
        left: Sequence[MpcEstimate], right: Sequence[MpcEstimate]
    ) -> npt.NDArray[np.float64]:
        return _delay_gaps(left, right)

    chains = _to_trajectories(est, _chains(est, _link(est, delay_cost, delay_gate_s)), min_len)
    best: Optional[Tuple[int, float, Trajectory]] = None
    for traj in chains:
        for normal, wall_index in normals:
            if not _spans(traj, normal, step):
                continue
            a, rms = _fit_wall(traj, pose.azimuth_radius_m, normal)
            if rms >= delay_bin_s:
                continue
            logger.debug(
                f"reference candidate {traj.id}: wall {wall_index}, a={a:.4f} m, "
                f"rms={rms * 1e12:.2f} ps, length {len(traj)}"
            )
            key = (len(traj), traj.mean_power_db)
            if best is None or key > best[:2]:
                best = (len(traj), traj.mean_power_db, traj)
    if best is None:
        raise CalibrationError(
            f"no specular reference trajectory found for pose {est.pose_index}"
        )
    return best[2]


def compute_weights(reference: Trajectory) -> McdWeights:
    if len(reference) < 3:
        raise ValueError(f"reference trajectory needs at least 3 members, got {len(reference)}")
    diff_power = np.abs(np.diff(reference.powers_db))
    diff_delay = np.abs(np.diff(reference.delays_s)) * 1e9
    s_power = max(float(np.std(diff_power, ddof=1)), WEIGHT_FLOOR)
    s_delay = max(float(np.std(diff_delay, ddof=1)), WEIGHT_FLOOR)
    weights = McdWeights(
        w_power=1.0 / math.sqrt(s_power),
        w_delay=1.0 / math.sqrt(s_delay),
        s_power=s_power,
        s_delay=s_delay,
    )
    distances = [
        mcd(a, b, weights)
        for (_, a), (_, b) in zip(reference.members[:-1], reference.members[1:])
    ]
    return attrs.evolve(weights, reference_mcd_median=float(np.median(distances)))


def track_trajectories(
    est: EstimateSet, w: McdWeights, cfg: TrackerConfig = TrackerConfig()
) -> List[Trajectory]:
    median = w.reference_mcd_median
    cost_gate = cfg.mcd_gate_multiplier * median if median else None

    def mcd_cost(
        left: Sequence[MpcEstimate], right: Sequence[MpcEstimate]
    ) -> npt.NDArray[np.float64]:
        return _mcd_matrix(left, right, w)

    successors = _link(est, mcd_cost, cfg.delay_gate_s, cost_gate, cfg.assignment)
    trajectories = _to_trajectories(est, _chains(est, successors), cfg.min_track_len)
    logger.info(f"pose {est.pose_index}: {len(trajectories)} trajectories")
    return trajectories


def strongest_member(traj: Trajectory) -> int:
    """Index of the max-power member, ties going to the one nearest the middle."""
    powers = traj.powers_db
    tied = np.flatnonzero(np.isclose(powers, powers.max(), rtol=0.0, atol=1e-9))
    middle = (len(traj) - 1) / 2.0
    return int(min(tied, key=lambda index: (abs(index - middle), index)))


def _refined_azimuth(traj: Trajectory, index: int) -> float:
    """Vertex of the parabola through the dB powers around member ``index``.

    The two-way main lobe is parabolic in dB, so its vertex sits on the true
    azimuth. Members at either end of the trajectory, or with uneven angular
    spacing, keep their grid angle.
    """
    angles = traj.angles_deg
    if not 0 < index < len(traj) - 1:
        return float(angles[index])
    step = float(geometry.wrap_deg(angles[index + 1] - angles[index]))
    if not math.isclose(step, float(geometry.wrap_deg(angles[index] - angles[index - 1]))):
        return float(angles[index])
    below, peak, above = traj.powers_db[index - 1 : index + 2]
    curvature = below - 2.0 * peak + above
    if not curvature < 0:
        return float(angles[index])
    offset = float(np.clip(0.5 * (below - above) / curvature, -0.5, 0.5))
    return float((angles[index] + offset * step) % 360.0)


def deembed(trajs: Sequence[Trajectory], refine_azimuth: bool = False) -> List[DeembeddedMpc]:
    """Collapse each trajectory to its strongest member.

    With ``refine_azimuth`` the azimuth is moved off the rotation grid to the
    interpolated beam peak. Amplitude and delay always come from the member.
    """
    deembedded = []
    for traj in trajs:
        chosen = strongest_member(traj)
        angle, mpc = traj.members[chosen]
        if refine_azimuth:
            angle = _refined_azimuth(traj, chosen)
        deembedded.append(
            DeembeddedMpc(
                amplitude=mpc.amplitude,
                delay_s=mpc.delay_s,
                azimuth_deg=angle,
                source_trajectory_id=traj.id,
            )
        )
    return deembedded


def trajectories_to_frame(trajs: Sequence[Trajectory]) -> pd.DataFrame:
    records = [
        (traj.id, angle, mpc.delay_s * 1e9, mpc.power_db, mpc.phase_rad)
        for traj in trajs
        for angle, mpc in traj.members
    ]
    return pd.DataFrame.from_records(records, columns=TRAJECTORY_COLUMNS)


def trajectories_from_frame(frame: pd.DataFrame) -> List[Trajectory]:
    missing = [column for column in TRAJECTORY_COLUMNS if column not in frame.columns]
    if missing:
        raise ValueError(f"trajectory table lacks column {missing[0]!r}")
    trajs = []
    for traj_id, group in frame.groupby("trajectory_id", sort=True):
        members = [
            (
                float(row.angle_deg),
                MpcEstimate.from_power(row.power_db, row.delay_ns * 1e-9, row.phase_rad),
            )
            for row in group.itertuples(index=False)
        ]
        trajs.append(Trajectory(id=int(traj_id), members=members))
    return trajs


def trajectories_figure_frame(trajs: Sequence[Trajectory]) -> pd.DataFrame:
    """Trajectory members with the member each trajectory collapses to flagged."""
    frame = trajectories_to_frame(trajs)
    flags: List[bool] = []
    for traj in trajs:
        chosen = strongest_member(traj)
        flags += [index == chosen for index in range(len(traj))]
    frame["deembedded"] = flags
    return frame


def deembedded_to_frame(mpcs: Sequence[DeembeddedMpc]) -> pd.DataFrame:
    records = [
        (mpc.source_trajectory_id, mpc.azimuth_deg, mpc.delay_s * 1e9, mpc.power_db, mpc.phase_rad)
        for mpc in mpcs
    ]
    return pd.DataFrame.from_records(records, columns=DEEMBEDDED_COLUMNS)


def deembedded_from_frame(frame: pd.DataFrame) -> List[DeembeddedMpc]:
    missing = [column for column in DEEMBEDDED_COLUMNS if column not in frame.columns]
    if missing:
        raise ValueError(f"de-embedded table lacks column {missing[0]!r}")
    return [
        DeembeddedMpc(
            amplitude=MpcEstimate.from_power(row.power_db, 0.0, row.phase_rad).amplitude,
            delay_s=row.delay_ns * 1e-9,
            azimuth_deg=row.azimuth_deg,
            source_trajectory_id=int(row.id),
        )
        for row in frame.itertuples(index=False)
    ]
