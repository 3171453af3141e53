from __future__ import annotations

import logging
import math
from typing import Optional

import attrs
import numpy as np
import numpy.typing as npt
import pandas as pd

from .synthesis import DirectionalCfr

DEFAULT_GUARD_DELAY_S = 70e-9
WINDOWS = ("rect", "hann")
# 200 dB below the profile peak is round-off, not noise
NUMERICAL_FLOOR_RATIO = 1e-20

logger = logging.getLogger(__name__)


@attrs.define(eq=False)
class Pdp:
    delays_s: npt.NDArray[np.float64]
    power_db: npt.NDArray[np.float64]
    angle_deg: float = 0.0


@attrs.define(eq=False)
class Padp:
    angles_deg: npt.NDArray[np.float64]
    delays_s: npt.NDArray[np.float64]
    power_db: npt.NDArray[np.float64]

    def __attrs_post_init__(self) -> None:
        expected = (len(self.angles_deg), len(self.delays_s))
        if self.power_db.shape != expected:
            raise ValueError(f"power shape {self.power_db.shape} does not match {expected}")

    def row(self, index: int) -> Pdp:
        return Pdp(self.delays_s, self.power_db[index], float(self.angles_deg[index]))

    def to_frame(self) -> pd.DataFrame:
        n_angles, n_delays = self.power_db.shape
        return pd.DataFrame(
            {
                "angle_deg": np.repeat(self.angles_deg, n_delays),
                "delay_ns": np.tile(self.delays_s * 1e9, n_angles),
                "power_db": self.power_db.ravel(),
            }
        )


def window_taper(name: str, n: int) -> npt.NDArray[np.float64]:
    """Window scaled to unit mean energy."""
    if name == "rect":
        return np.ones(n)
    if name == "hann":
        taper = np.hanning(n)
        return taper / np.sqrt(np.mean(taper**2))
    raise ValueError(f"unknown window {name!r}, expected one of {WINDOWS}")


def delay_grid(n_freq: int, freq_step_hz: float) -> npt.NDArray[np.float64]:
    return np.arange(n_freq) / (n_freq * freq_step_hz)


def cfr_to_pdp(
    row: npt.ArrayLike,
    window: str = "rect",
    freqs: Optional[npt.ArrayLike] = None,
    n_freq: Optional[int] = None,
    angle_deg: float = 0.0,
) -> Pdp:
    """Inverse DFT of one CFR row; ``freqs`` sets the delay axis, unit bins otherwise."""
    row = np.asarray(row, dtype=complex)
    if row.ndim != 1:
        raise ValueError(f"expected a 1D row, got shape {row.shape}")
    expected = n_freq if n_freq is not None else (None if freqs is None else len(np.asarray(freqs)))
    if expected is not None and len(row) != expected:
        raise ValueError(f"row length {len(row)} does not match n_freq {expected}")
    if freqs is None:
        delays = np.arange(len(row)) / len(row)
    else:
        freqs = np.asarray(freqs, dtype=float)
        delays = delay_grid(len(freqs), float(freqs[1] - freqs[0]))
    h = np.fft.ifft(row * window_taper(window, len(row)))
    with np.errstate(divide="ignore"):
        power_db = 10.0 * np.log10(np.abs(h) ** 2)
    return Pdp(delays_s=delays, power_db=power_db, angle_deg=angle_deg)


def compute_padp(cfr: DirectionalCfr, window: str = "rect") -> Padp:
    taper = window_taper(window, len(cfr.freqs_hz))
    h = np.fft.ifft(cfr.data * taper[None, :], axis=1)
    with np.errstate(divide="ignore"):
        power_db = 10.0 * np.log10(np.abs(h) ** 2)
    delays = delay_grid(len(cfr.freqs_hz), float(cfr.freqs_hz[1] - cfr.freqs_hz[0]))
    logger.debug(f"PADP of pose {cfr.pose_index}: {power_db.shape}")
    return Padp(angles_deg=np.asarray(cfr.angles_deg), delays_s=delays, power_db=power_db)


def estimate_noise_floor(pdp: Pdp, guard_delay_s: float = DEFAULT_GUARD_DELAY_S) -> float:
    """Mean-equivalent noise power of the tail beyond ``guard_delay_s``.

    The median of exponentially distributed noise powers is ``ln 2`` times
    their mean. Returns ``-inf`` when the tail holds no energy above the
    numerical noise of the transform.
    """
    tail = pdp.power_db[pdp.delays_s > guard_delay_s]
    if tail.size == 0:
        raise ValueError(
            f"no delay bins beyond the {guard_delay_s * 1e9:.1f} ns guard"
        )
    median = float(np.median(10.0 ** (tail / 10.0)))
    peak = float(np.max(10.0 ** (pdp.power_db / 10.0)))
    if median <= peak * NUMERICAL_FLOOR_RATIO:
        return -math.inf
    return 10.0 * math.log10(median / math.log(2.0))
