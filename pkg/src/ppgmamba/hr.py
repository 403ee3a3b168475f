"""Beat detection and heart-rate statistics for PPG segments.

The detector follows the Heartpy scheme: the signal is min-max scaled, a
0.75 s rolling mean is raised by a percentage of its own mean, and peaks are
the maxima of the runs where the signal exceeds that threshold.  The
percentage is swept over 5..30 % and the setting giving the most regular
inter-beat intervals (lowest IBI standard deviation) inside 40-180 BPM wins.

All variances are population variances (divide by n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

MA_PERCENTS = (5, 10, 15, 20, 25, 30)
BPM_RANGE = (40.0, 180.0)


class PeakDetectionError(ValueError):
    """Raised when no threshold setting yields at least two peaks."""


@dataclass
class BeatSeries:
    peak_indices: np.ndarray
    ibis: np.ndarray  # ms
    fs: float


@dataclass
class HRStats:
    bpm: float
    rmssd: float
    sd1: float
    sd2: float
    sd1sd2: float


def _scale(signal: np.ndarray) -> np.ndarray:
    lo, hi = signal.min(), signal.max()
    if not np.isfinite(lo) or not np.isfinite(hi) or hi - lo <= 0:
        raise PeakDetectionError("signal is flat or non-finite")
    return (signal - lo) / (hi - lo) * 1024.0


def _peaks_above(signal: np.ndarray, threshold: np.ndarray) -> np.ndarray:
    above = signal > threshold
    if not above.any():
        return np.empty(0, dtype=int)
    edges = np.diff(above.astype(np.int8), prepend=0, append=0)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    L = len(signal)
    peaks = []
    for s, e in zip(starts, stops):
        i = s + int(np.argmax(signal[s:e]))  # first sample of a plateau
        # a run cut by the record edge whose maximum sits on the edge may be
        # the tail of a beat outside the window
        if (s == 0 and i == 0 and e > 1) or (e == L and i == L - 1 and e - s > 1):
            continue
        peaks.append(i)
    return np.asarray(peaks, dtype=int)


def _rate_plausible(mean_ibi: float, fs: float) -> bool:
    """Mean IBI inside BPM_RANGE, allowing one sample of peak-timing quantisation."""
    tol = 1000.0 / fs
    if mean_ibi <= tol:
        return False
    return 60000.0 / (mean_ibi - tol) >= BPM_RANGE[0] and 60000.0 / (mean_ibi + tol) <= BPM_RANGE[1]


def detect_peaks(signal, fs: float) -> BeatSeries:
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("detect_peaks expects a 1-D signal")
    if len(x) < 2 * fs:
        raise ValueError(f"need at least 2 s of signal, got {len(x) / fs:.2f} s")
    scaled = _scale(x)
    win = max(int(round(0.75 * fs)), 1)
    rol = uniform_filter1d(scaled, size=win, mode="nearest")
    base = np.mean(rol)
    best = None  # (ibi std, peaks)
    n_candidates = 0
    for perc in MA_PERCENTS:
        peaks = _peaks_above(scaled, rol + base * perc / 100.0)
        if len(peaks) < 2:
            continue
        n_candidates += 1
        ibis = np.diff(peaks) / fs * 1000.0
        if not _rate_plausible(ibis.mean(), fs):
            continue
        sd = float(np.std(ibis))
        if best is None or sd < best[0]:
            best = (sd, peaks)
    if n_candidates == 0:
        raise PeakDetectionError("no threshold setting produced two or more peaks")
    if best is None:
        raise PeakDetectionError(f"no threshold setting gave a rate inside {BPM_RANGE} BPM")
    peaks = best[1]
    return BeatSeries(peak_indices=peaks, ibis=np.diff(peaks) / fs * 1000.0, fs=fs)


def hr(signal, fs: float) -> float:
    """Heart rate in BPM: 60000 / mean IBI."""
    return bpm_from_ibis(detect_peaks(signal, fs).ibis)


def bpm_from_ibis(ibis) -> float:
    ibis = np.asarray(ibis, dtype=float)
    if len(ibis) < 1:
        raise ValueError("need at least one IBI")
    return 60000.0 / ibis.mean()


def rmssd(ibis) -> float:
    ibis = np.asarray(ibis, dtype=float)
    if len(ibis) < 2:
        raise ValueError("rmssd needs at least 2 IBIs")
    return float(np.sqrt(np.mean(np.diff(ibis) ** 2)))


def poincare(ibis) -> tuple[float, float, float]:
    """(sd1, sd2, sd1/sd2) of the Poincare plot of successive IBIs.

    The ratio is 0 when both axes are 0 and +inf when only sd2 is 0.
    """
    ibis = np.asarray(ibis, dtype=float)
    if len(ibis) < 3:
        raise ValueError("poincare needs at least 3 IBIs")
    var_diff = np.var(np.diff(ibis))
    sd1 = float(np.sqrt(var_diff / 2.0))
    sd2 = float(np.sqrt(max(0.0, 2.0 * np.var(ibis) - var_diff / 2.0)))
    if sd2 == 0.0:
        ratio = 0.0 if sd1 == 0.0 else float("inf")
    else:
        ratio = sd1 / sd2
    return sd1, sd2, ratio


def hr_stats(signal, fs: float) -> HRStats:
    beats = detect_peaks(signal, fs)
    sd1, sd2, ratio = poincare(beats.ibis)
    return HRStats(bpm=bpm_from_ibis(beats.ibis), rmssd=rmssd(beats.ibis), sd1=sd1, sd2=sd2, sd1sd2=ratio)
