"""Per-angle multipath estimation with CLEAN initialization and SAGE sweeps."""

from __future__ import annotations

import concurrent.futures
import itertools
import logging
import math
from typing import Any, List, Optional, Sequence, Tuple

import attrs
import numpy as np
import numpy.typing as npt
import pandas as pd

from . import padp
from .synthesis import DirectionalCfr

logger = logging.getLogger(__name__)

ESTIMATE_COLUMNS = ["angle_deg", "path_index", "delay_ns", "power_db", "phase_rad"]


def _power_db(self: "MpcEstimate") -> float:
    return 20.0 * math.log10(abs(self.amplitude))


@attrs.frozen
class MpcEstimate:
    amplitude: complex = attrs.field(converter=complex)
    delay_s: float = attrs.field(converter=float)
    power_db: float = attrs.field(
        default=attrs.Factory(_power_db, takes_self=True), converter=float
    )

    @classmethod
    def from_power(cls, power_db: float, delay_s: float, phase_rad: float = 0.0) -> MpcEstimate:
        amplitude = 10.0 ** (power_db / 20.0) * complex(math.cos(phase_rad), math.sin(phase_rad))
        return cls(amplitude=amplitude, delay_s=delay_s, power_db=power_db)

    @property
    def phase_rad(self) -> float:
        return math.atan2(self.amplitude.imag, self.amplitude.real)


@attrs.frozen
class AngleEstimate:
    angle_deg: float
    mpcs: Tuple[MpcEstimate, ...] = attrs.field(converter=tuple, factory=tuple)
    residual_power_db: float = -math.inf
    noise_floor_db: float = -math.inf
    sweep_residuals_db: Tuple[float, ...] = attrs.field(converter=tuple, factory=tuple)


@attrs.frozen
class EstimateSet:
    pose_index: int
    angles: Tuple[AngleEstimate, ...] = attrs.field(converter=tuple)

    @property
    def angles_deg(self) -> npt.NDArray[np.float64]:
        return np.array([angle.angle_deg for angle in self.angles])

    @property
    def n_mpcs(self) -> int:
        return sum(len(angle.mpcs) for angle in self.angles)

    def to_frame(self) -> pd.DataFrame:
        records = [
            (angle.angle_deg, index, mpc.delay_s * 1e9, mpc.power_db, mpc.phase_rad)
            for angle in self.angles
            for index, mpc in enumerate(angle.mpcs)
        ]
        return pd.DataFrame.from_records(records, columns=ESTIMATE_COLUMNS)

    @classmethod
    def from_frame(
        cls, frame: pd.DataFrame, pose_index: int, angles_deg: Sequence[float]
    ) -> EstimateSet:
        missing = [column for column in ESTIMATE_COLUMNS if column not in frame.columns]
        if missing:
            raise ValueError(f"estimate table lacks column {missing[0]!r}")
        by_angle: dict[float, List[MpcEstimate]] = {float(a): [] for a in angles_deg}
        for row in frame.sort_values(["angle_deg", "path_index"]).itertuples(index=False):
            angle = float(row.angle_deg)
            if angle not in by_angle:
                raise ValueError(f"estimate angle {angle} is not on the rotation grid")
            by_angle[angle].append(
                MpcEstimate.from_power(row.power_db, row.delay_ns * 1e-9, row.phase_rad)
            )
        return cls(
            pose_index=pose_index,
            angles=[AngleEstimate(angle, mpcs) for angle, mpcs in by_angle.items()],
        )


def _positive(instance: Any, attribute: "attrs.Attribute[Any]", value: Any) -> None:
    if not value > 0:
        raise ValueError(f"{attribute.name} must be positive, got {value!r}")


@attrs.frozen
class SageConfig:
    threshold_offset_db: float = attrs.field(default=10.0, converter=float, validator=_positive)
    max_paths: int = attrs.field(default=50, converter=int, validator=_positive)
    em_max_iters: int = attrs.field(default=20, converter=int, validator=_positive)
    delay_tol_s: float = attrs.field(default=1e-13, converter=float, validator=_positive)
    refine_grid_factor: int = attrs.field(default=64, converter=int, validator=_positive)
    guard_delay_s: float = attrs.field(
        default=padp.DEFAULT_GUARD_DELAY_S, converter=float, validator=_positive
    )


def steering(freqs: npt.NDArray[np.float64], delays: npt.ArrayLike) -> npt.NDArray[np.complex128]:
    """Columns ``exp(-j 2 pi f tau)`` for each delay."""
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    return np.exp(-2j * np.pi * freqs[:, None] * delays[None, :])


def correlate(x: npt.NDArray[np.complex128], freqs: npt.NDArray[np.float64], tau: float) -> complex:
    return complex(np.vdot(np.exp(-2j * np.pi * freqs * tau), x) / len(x))


def _climb(
    x: npt.NDArray[np.complex128],
    freqs: npt.NDArray[np.float64],
    tau: float,
    step: float,
    max_steps: int,
) -> Tuple[float, float]:
    """Hill-climb ``|c(tau)|`` on a grid of ``step`` then interpolate the vertex."""
    n = len(x)
    shift = np.exp(2j * np.pi * freqs * step)
    e0 = np.exp(2j * np.pi * freqs * tau)
    em, ep = e0 * np.conj(shift), e0 * shift
    v0, vm, vp = (abs(np.dot(e, x)) / n for e in (e0, em, ep))
    moves = 0
    while moves < max_steps and max(vm, vp) > v0:
        if vp >= vm:
            tau += step
            em, e0, vm, v0 = e0, ep, v0, vp
            ep = e0 * shift
            vp = abs(np.dot(ep, x)) / n
        else:
            tau -= step
            ep, e0, vp, v0 = e0, em, v0, vm
            em = e0 * np.conj(shift)
            vm = abs(np.dot(em, x)) / n
        moves += 1
    curvature = vm - 2.0 * v0 + vp
    offset = 0.0
    if curvature < 0:
        offset = float(np.clip(0.5 * (vm - vp) / curvature, -0.5, 0.5))
    return tau + offset * step, float(v0)


def _joint_amplitudes(
    x: npt.NDArray[np.complex128], freqs: npt.NDArray[np.float64], delays: Sequence[float]
) -> npt.NDArray[np.complex128]:
    if not len(delays):
        return np.zeros(0, dtype=complex)
    amplitudes, *_ = np.linalg.lstsq(steering(freqs, delays), x, rcond=None)
    return amplitudes


def _residual_db(residual: npt.NDArray[np.complex128]) -> float:
    energy = float(np.mean(np.abs(residual) ** 2)) / len(residual)
    return 10.0 * math.log10(energy) if energy > 0 else -math.inf


def _cyclic_distance(a: float, b: float, period: float) -> float:
    gap = abs(a - b) % period
    return min(gap, period - gap)


def _too_close(tau: float, delays: Sequence[float], min_gap: float, period: float) -> bool:
    return any(_cyclic_distance(tau, other, period) < min_gap for other in delays)


def _separate(
    delays: Sequence[float],
    amplitudes: npt.NDArray[np.complex128],
    min_gap: float,
    period: float,
) -> List[float]:
    """Keep the stronger path of every pair closer than ``min_gap``."""
    kept: List[float] = []
    for index in np.argsort(-np.abs(amplitudes), kind="stable"):
        tau = delays[index]
        if not _too_close(tau, kept, min_gap, period):
            kept.append(tau)
    return [tau for tau in delays if tau in kept]


def _sage_sweeps(
    x: npt.NDArray[np.complex128],
    freqs: npt.NDArray[np.float64],
    delays: List[float],
    amplitudes: npt.NDArray[np.complex128],
    cfg: SageConfig,
    step: float,
) -> Tuple[List[float], npt.NDArray[np.complex128], List[float]]:
    history = []
    residual = x - steering(freqs, delays) @ amplitudes
    for iteration in range(cfg.em_max_iters):
        largest_move = 0.0
        for index in range(len(delays)):
            old_delay = delays[index]
            hidden = residual + amplitudes[index] * np.exp(-2j * np.pi * freqs * old_delay)
            new_delay, _ = _climb(hidden, freqs, old_delay, step, cfg.refine_grid_factor)
            new_corr = correlate(hidden, freqs, new_delay)
            old_corr = correlate(hidden, freqs, old_delay)
            if abs(new_corr) >= abs(old_corr):
                delays[index], amplitudes[index] = new_delay, new_corr
            else:
                amplitudes[index] = old_corr
            largest_move = max(largest_move, abs(delays[index] - old_delay))
            residual = hidden - amplitudes[index] * np.exp(-2j * np.pi * freqs * delays[index])
        history.append(_residual_db(residual))
        if largest_move < cfg.delay_tol_s:
            logger.debug(f"SAGE converged after {iteration + 1} sweeps")
            break
    return delays, amplitudes, history


def _blocked_bins(delays: Sequence[float], coarse_step: float, n: int) -> List[int]:
    return [
        (round(tau / coarse_step) + shift) % n for tau in delays for shift in (-1, 0, 1)
    ]


def estimate_angle(
    row: npt.ArrayLike,
    freqs: npt.ArrayLike,
    cfg: SageConfig = SageConfig(),
    noise_floor_db: float = -math.inf,
    angle_deg: float = 0.0,
) -> AngleEstimate:
    """Estimate the multipath components of one directional frequency response.

    Paths are kept at least one delay bin ``1 / (N df)`` apart and no estimate may
    carry more power than the row itself, so the joint least-squares solve stays
    well conditioned on dense diffuse rows.
    """
    x = np.asarray(row, dtype=complex)
    freqs = np.asarray(freqs, dtype=float)
    if x.shape != freqs.shape:
        raise ValueError(f"row length {len(x)} does not match {len(freqs)} frequencies")
    if not np.any(x):
        return AngleEstimate(angle_deg, (), -math.inf, noise_floor_db)

    n = len(x)
    freq_step = float(freqs[1] - freqs[0])
    coarse_step = 1.0 / (n * freq_step)
    fine_step = coarse_step / cfg.refine_grid_factor
    period = 1.0 / freq_step
    threshold = 10.0 ** ((noise_floor_db + cfg.threshold_offset_db) / 10.0)
    numerical_floor = float(np.max(np.abs(np.fft.ifft(x)) ** 2)) * padp.NUMERICAL_FLOOR_RATIO
    ceiling = float(np.mean(np.abs(x) ** 2)) * (1.0 + 1e-9)

    delays: List[float] = []
    amplitudes = np.zeros(0, dtype=complex)
    residual = x.copy()
    history: List[float] = []
    for _ in range(cfg.max_paths):
        if len(delays) >= cfg.max_paths:
            break
        added = 0
        pdp = np.abs(np.fft.ifft(residual))
        pdp[_blocked_bins(delays, coarse_step, n)] = -1.0
        while len(delays) < cfg.max_paths and pdp.max() > 0:
            coarse = int(np.argmax(pdp))
            tau, magnitude = _climb(
                residual, freqs, coarse * coarse_step, fine_step, cfg.refine_grid_factor
            )
            if magnitude**2 < threshold or magnitude**2 <= numerical_floor:
                break
            if _too_close(tau, delays, coarse_step, period):
                pdp[coarse] = -1.0
                continue
            alpha = correlate(residual, freqs, tau)
            delays.append(tau)
            amplitudes = np.append(amplitudes, alpha)
            residual = residual - alpha * np.exp(-2j * np.pi * freqs * tau)
            pdp = np.abs(np.fft.ifft(residual))
            pdp[_blocked_bins(delays, coarse_step, n)] = -1.0
            added += 1
        if not added:
            break
        logger.debug(f"angle {angle_deg} deg: {len(delays)} paths after initialization")
        amplitudes = _joint_amplitudes(x, freqs, delays)
        delays, amplitudes, sweeps = _sage_sweeps(x, freqs, delays, amplitudes, cfg, fine_step)
        history.extend(sweeps)
        separated = _separate(delays, amplitudes, coarse_step, period)
        if len(separated) < len(delays):
            logger.debug(f"angle {angle_deg} deg: merged {len(delays) - len(separated)} paths")
        delays = separated
        amplitudes = _joint_amplitudes(x, freqs, delays)
        residual = x - steering(freqs, delays) @ amplitudes if delays else x.copy()

    delays = [tau % period for tau in delays]
    amplitudes = _joint_amplitudes(x, freqs, delays)
    while delays:
        power = np.abs(amplitudes) ** 2
        keep = (power >= threshold) & (power <= ceiling)
        if keep.all():
            break
        delays = [tau for tau, kept in zip(delays, keep) if kept]
        amplitudes = _joint_amplitudes(x, freqs, delays)
    residual = x - steering(freqs, delays) @ amplitudes if delays else x

    mpcs = [
        MpcEstimate(amplitude=alpha, delay_s=tau)
        for alpha, tau in zip(amplitudes, delays)
        if abs(alpha) > 0
    ]
    mpcs.sort(key=lambda mpc: (-mpc.power_db, mpc.delay_s))
    return AngleEstimate(
        angle_deg=angle_deg,
        mpcs=mpcs,
        residual_power_db=_residual_db(residual),
        noise_floor_db=noise_floor_db,
        sweep_residuals_db=history,
    )


def reconstruct_row(est: AngleEstimate, freqs: npt.ArrayLike) -> npt.NDArray[np.complex128]:
    freqs = np.asarray(freqs, dtype=float)
    if not est.mpcs:
        return np.zeros(len(freqs), dtype=complex)
    amplitudes = np.array([mpc.amplitude for mpc in est.mpcs])
    return steering(freqs, [mpc.delay_s for mpc in est.mpcs]) @ amplitudes


def row_noise_floor(
    row: npt.NDArray[np.complex128],
    freqs: npt.NDArray[np.float64],
    guard_delay_s: float,
    fallback_db: float,
    window: str = "rect",
) -> float:
    try:
        pdp = padp.cfr_to_pdp(row, window=window, freqs=freqs)
        floor = padp.estimate_noise_floor(pdp, guard_delay_s)
    except ValueError:
        return fallback_db
    return fallback_db if math.isinf(floor) else floor


def _estimate_row(
    args: Tuple[npt.NDArray[np.complex128], npt.NDArray[np.float64], SageConfig, float, float, str],
) -> Tuple[AngleEstimate, Optional[str]]:
    row, freqs, cfg, fallback_db, angle, window = args
    floor = row_noise_floor(row, freqs, cfg.guard_delay_s, fallback_db, window)
    try:
        return estimate_angle(row, freqs, cfg, floor, angle), None
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return AngleEstimate(angle, (), -math.inf, floor), f"{type(exc).__name__}: {exc}"


def estimate_all(
    cfr: DirectionalCfr,
    cfg: SageConfig = SageConfig(),
    workers: int = 1,
    noise_floor_db: Optional[float] = None,
    window: str = "rect",
) -> EstimateSet:
    """Run ``estimate_angle`` on every row with its own noise floor.

    Rows without a measurable floor use ``noise_floor_db``, or the nominal
    floor recorded with the dataset.
    """
    fallback = cfr.noise_floor_db if noise_floor_db is None else noise_floor_db
    tasks = [
        (cfr.data[index], cfr.freqs_hz, cfg, fallback, float(angle), window)
        for index, angle in enumerate(cfr.angles_deg)
    ]
    if workers > 1:
        chunksize = max(1, len(tasks) // (workers * 4))
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_estimate_row, tasks, chunksize=chunksize))
    else:
        results = [_estimate_row(task) for task in tasks]
    for estimate, error in results:
        if error is not None:
            logger.warning(
                f"pose {cfr.pose_index} angle {estimate.angle_deg} deg: estimation failed ({error})"
            )
    estimates = EstimateSet(cfr.pose_index, [estimate for estimate, _ in results])
    logger.info(f"pose {cfr.pose_index}: {estimates.n_mpcs} MPCs over {len(results)} angles")
    return estimates


def grid_search_ml(
    row: npt.ArrayLike,
    freqs: npt.ArrayLike,
    centers: Sequence[float],
    half_width_s: float,
    step_s: float,
) -> npt.NDArray[np.float64]:
    """Exhaustive maximum-likelihood delays over a grid around ``centers``.

    Every combination of per-path grid delays is scored by the residual
    energy of its least-squares fit, so the cost grows as the grid size to
    the power of the number of paths.
    """
    x = np.asarray(row, dtype=complex)
    freqs = np.asarray(freqs, dtype=float)
    offsets = np.arange(-half_width_s, half_width_s + step_s / 2.0, step_s)
    grids = [center + offsets for center in centers]
    columns = [steering(freqs, grid) for grid in grids]
    best_energy, best = math.inf, np.asarray(centers, dtype=float)
    for combination in itertools.product(*(range(len(grid)) for grid in grids)):
        basis = np.column_stack([columns[p][:, k] for p, k in enumerate(combination)])
        amplitudes, *_ = np.linalg.lstsq(basis, x, rcond=None)
        energy = float(np.sum(np.abs(x - basis @ amplitudes) ** 2))
        if energy < best_energy:
            best_energy = energy
            best = np.array([grids[p][k] for p, k in enumerate(combination)])
    return best
