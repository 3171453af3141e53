from __future__ import annotations

import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import attrs
import numpy as np
import numpy.typing as npt
import pandas as pd

from . import geometry
from .geometry import C, SceneModel, TrxPose
from .hybrid import ClassifiedMpc, MpcLabel
from .sage import EstimateSet
from .tracking import DeembeddedMpc

logger = logging.getLogger(__name__)

# poses far up the first route leg, and those from near the bend onwards
POSE_GROUPS = {"1-9": (1, 9), "10-28": (10, 28)}


@attrs.frozen
class ReconPoint:
    x_m: float
    y_m: float
    power_db: float
    source_id: int = 0


@attrs.frozen
class SpreadSample:
    value: float = attrs.field(validator=attrs.validators.ge(0.0))
    context: float


@attrs.frozen
class LognormalFit:
    mu: float
    sigma: float = attrs.field(validator=attrs.validators.ge(0.0))
    n_samples: int = 0


@attrs.frozen(eq=False)
class DistanceErrorCdf:
    errors_m: npt.NDArray[np.float64]
    probabilities: npt.NDArray[np.float64]
    mean_m: Optional[float]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"value": self.errors_m, "cumulative_prob": self.probabilities})


def reconstruct_environment(
    deembedded: Sequence[DeembeddedMpc],
    pose: TrxPose,
    origin: Tuple[float, float] = (0.0, 0.0),
) -> List[ReconPoint]:
    points = []
    for mpc in deembedded:
        direction = geometry.unit_vector(mpc.azimuth_deg)
        point = pose.phase_center(mpc.azimuth_deg) + C * mpc.delay_s / 2.0 * direction
        points.append(
            ReconPoint(
                x_m=float(point[0] - origin[0]),
                y_m=float(point[1] - origin[1]),
                power_db=mpc.power_db,
                source_id=mpc.source_trajectory_id,
            )
        )
    return points


def distance_error_cdf(points: Sequence[ReconPoint], scene: SceneModel) -> DistanceErrorCdf:
    if not points:
        return DistanceErrorCdf(np.zeros(0), np.zeros(0), None)
    scene.validate()
    errors = np.sort(
        [geometry.nearest_wall(scene, (point.x_m, point.y_m))[1] for point in points]
    )
    probabilities = np.arange(1, len(errors) + 1) / len(errors)
    return DistanceErrorCdf(errors, probabilities, float(np.mean(errors)))


def reflection_loss(
    deembedded: Sequence[DeembeddedMpc], f_c: float = 300e9, boresight_gain_dbi: float = 25.5
) -> List[float]:
    """Propagation loss left after free-space loss, per MPC.

    The de-embedded amplitude still carries the two-way boresight gain,
    which is removed first.
    """
    losses = []
    for mpc in deembedded:
        if not mpc.delay_s > 0:
            raise ValueError(f"MPC {mpc.source_trajectory_id} has non-positive delay")
        if abs(mpc.amplitude) == 0:
            logger.warning(f"MPC {mpc.source_trajectory_id} has zero amplitude")
            losses.append(math.inf)
            continue
        compensated_db = mpc.power_db - 2.0 * boresight_gain_dbi
        losses.append(-compensated_db - geometry.fspl_db(f_c, C * mpc.delay_s))
    return losses


def _losses_by_kind(
    classified: Sequence[ClassifiedMpc], f_c: float, boresight_gain_dbi: float, target_only: bool
) -> Dict[str, List[float]]:
    groups: Dict[str, List[float]] = {}
    for item in classified:
        if item.matched_feature is None or item.mpc.delay_s <= 0:
            continue
        if target_only and item.label != MpcLabel.TARGET_SPECULAR:
            continue
        (loss,) = reflection_loss([item.mpc], f_c, boresight_gain_dbi)
        groups.setdefault(item.matched_feature.kind, []).append(loss)
    return groups


def reflection_loss_by_kind(
    classified: Sequence[ClassifiedMpc],
    f_c: float = 300e9,
    boresight_gain_dbi: float = 25.5,
    target_only: bool = True,
) -> Dict[str, Dict[str, float]]:
    """Loss statistics grouped by the kind of feature each MPC was matched to.

    By default only target-specular MPCs count; ``target_only=False`` takes
    every matched MPC, diffuse ones included.
    """
    groups = _losses_by_kind(classified, f_c, boresight_gain_dbi, target_only)
    return {
        kind: {
            "count": len(values),
            "min_db": float(np.min(values)),
            "max_db": float(np.max(values)),
            "mean_db": float(np.mean(values)),
        }
        for kind, values in sorted(groups.items())
    }


def reflection_loss_cdf(
    classified: Sequence[ClassifiedMpc],
    f_c: float = 300e9,
    boresight_gain_dbi: float = 25.5,
    target_only: bool = False,
) -> pd.DataFrame:
    """Empirical CDF of reflection loss per feature kind."""
    frames = []
    for kind, values in sorted(_losses_by_kind(classified, f_c, boresight_gain_dbi, target_only).items()):
        values = np.sort(values)
        frames.append(
            pd.DataFrame(
                {
                    "kind": kind,
                    "value": values,
                    "cumulative_prob": np.arange(1, len(values) + 1) / len(values),
                }
            )
        )
    if not frames:
        return pd.DataFrame(columns=["kind", "value", "cumulative_prob"])
    return pd.concat(frames, ignore_index=True)


def _split(mpcs: Sequence[Tuple[float, float]]) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    if not len(mpcs):
        raise ValueError("spread needs at least one MPC")
    powers, values = np.array(mpcs, dtype=float).T
    if np.any(powers < 0) or not np.sum(powers) > 0:
        raise ValueError("spread needs non-negative powers with a positive sum")
    return powers, values


def rms_delay_spread(mpcs: Sequence[Tuple[float, float]]) -> float:
    """Root of the power-weighted second central moment of (power, delay) pairs."""
    powers, delays = _split(mpcs)
    mean = np.sum(powers * delays) / np.sum(powers)
    return float(math.sqrt(max(np.sum(powers * (delays - mean) ** 2) / np.sum(powers), 0.0)))


def circular_angular_spread(mpcs: Sequence[Tuple[float, float]]) -> float:
    """Power-weighted spread of (power, azimuth in deg) pairs around their circular mean."""
    powers, azimuths = _split(mpcs)
    radians = np.radians(azimuths)
    mean = math.degrees(
        math.atan2(np.sum(powers * np.sin(radians)), np.sum(powers * np.cos(radians)))
    )
    deviations = geometry.wrap_deg(azimuths - mean)
    return float(math.sqrt(np.sum(powers * deviations**2) / np.sum(powers)))


def fit_lognormal(samples: npt.ArrayLike) -> LognormalFit:
    values = np.asarray(samples, dtype=float)
    values = values[values > 0]
    if values.size == 0:
        raise ValueError("no positive samples to fit")
    logs = np.log10(values)
    sigma = float(np.std(logs, ddof=1)) if logs.size > 1 else 0.0
    return LognormalFit(mu=float(np.mean(logs)), sigma=sigma, n_samples=int(logs.size))


def fraction_below(samples: npt.ArrayLike, threshold: float) -> float:
    values = np.asarray(samples, dtype=float)
    if values.size == 0:
        raise ValueError("no samples")
    return float(np.mean(values < threshold))


def delay_spreads_per_angle(est: EstimateSet) -> List[SpreadSample]:
    """RMS delay spread in ns of the per-angle estimates, skipping empty angles."""
    return [
        SpreadSample(
            value=rms_delay_spread([(abs(m.amplitude) ** 2, m.delay_s * 1e9) for m in angle.mpcs]),
            context=angle.angle_deg,
        )
        for angle in est.angles
        if angle.mpcs
    ]


def delay_spreads_from_deembedded(
    deembedded: Sequence[DeembeddedMpc], bin_deg: float = 1.0
) -> List[SpreadSample]:
    bins: Dict[int, List[Tuple[float, float]]] = {}
    for mpc in deembedded:
        key = int(math.floor((mpc.azimuth_deg % 360.0) / bin_deg + 1e-9))
        bins.setdefault(key, []).append((abs(mpc.amplitude) ** 2, mpc.delay_s * 1e9))
    return [
        SpreadSample(value=rms_delay_spread(mpcs), context=key * bin_deg)
        for key, mpcs in sorted(bins.items())
    ]


def angular_spread_per_pose(deembedded: Sequence[DeembeddedMpc], pose_index: int) -> SpreadSample:
    spread = circular_angular_spread(
        [(abs(mpc.amplitude) ** 2, mpc.azimuth_deg) for mpc in deembedded]
    )
    return SpreadSample(value=spread, context=float(pose_index))


def spreads_by_pose_group(
    samples: Sequence[SpreadSample], groups: Mapping[str, Tuple[int, int]] = POSE_GROUPS
) -> Dict[str, List[SpreadSample]]:
    """Split per-pose samples into inclusive pose-index ranges."""
    return {
        name: [sample for sample in samples if low <= sample.context <= high]
        for name, (low, high) in groups.items()
    }


def far_field_fraction(
    deembedded: Sequence[DeembeddedMpc], aperture_m: float, wavelength_m: float
) -> float:
    """Share of MPCs whose one-way range exceeds the far-field distance."""
    if not deembedded:
        raise ValueError("no MPCs")
    limit = geometry.far_field_distance(aperture_m, wavelength_m)
    return float(np.mean([C * mpc.delay_s / 2.0 >= limit for mpc in deembedded]))


def points_to_frame(points: Sequence[ReconPoint]) -> pd.DataFrame:
    return pd.DataFrame.from_records(
        [(p.x_m, p.y_m, p.power_db, p.source_id) for p in points],
        columns=["x_m", "y_m", "power_db", "source_id"],
    )


def spreads_to_frame(samples: Sequence[SpreadSample], context: str) -> pd.DataFrame:
    return pd.DataFrame.from_records(
        [(s.context, s.value) for s in samples], columns=[context, "value"]
    )
