"""Data preparation: ingestion, windowing, quality gating and contamination.

Signals are plain float64 numpy vectors.  Everything here is pure: a noisy
segment is a deterministic function of the clean samples and a seed.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal as sps

from . import hr as hra

FS = 125.0
WIN_S = 6.0
OVERLAP_S = 4.0
SEG_LEN = int(WIN_S * FS)  # 750

SOURCES = ("bidmc-csv", "wrist-csv", "synthetic")
NOISE_KINDS = ("gaussian", "sloping_baseline", "saturation", "poisson",
               "salt_pepper", "speckle", "uniform")
SPLITS = ("train", "val", "test")

# gate thresholds
BPM_GATE = (40.0, 150.0)
IBI_GATE = (400.0, 2000.0)  # ms
RMSSD_MAX = 100.0
SD_RATIO_MAX = 6.0


@dataclass
class Record:
    subject_id: str
    fs: float
    samples: np.ndarray
    source: str = "synthetic"
    dropped: int = 0  # rows discarded at ingestion

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("a record needs a non-empty 1-D sample vector")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("record samples must be finite")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}; expected one of {SOURCES}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs


@dataclass
class Segment:
    samples: np.ndarray  # clean, 750 samples at 125 Hz
    bpm_label: float
    subject_id: str
    window_index: int
    split: str = "train"
    noisy: Optional[np.ndarray] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.shape != (SEG_LEN,):
            raise ValueError(f"segment must have {SEG_LEN} samples, got {self.samples.shape}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class NoiseSpec:
    """One synthetic corruption.

    ``intensity`` depends on ``kind``:

    ================  =======================================  ==============
    kind              meaning                                  default draw
    ================  =======================================  ==============
    gaussian          target SNR in dB                         U[0, 10]
    uniform           target SNR in dB                         U[0, 10]
    speckle           target SNR in dB (multiplicative noise)  U[0, 10]
    poisson           target SNR in dB (shot noise)            U[0, 10]
    sloping_baseline  ramp end amplitude, in signal stds       +-U[0.5, 2]
    saturation        absolute clip level                      90th pct |g|
    salt_pepper       fraction of corrupted samples            U[0.005, 0.02]
    ================  =======================================  ==============

    ``None`` draws the intensity from the default range with ``rng_seed``.
    """

    kind: str
    intensity: Optional[float] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.intensity is not None:
            v = float(self.intensity)
            if not math.isfinite(v):
                raise ValueError("noise intensity must be finite")
            if self.kind == "salt_pepper" and not 0.0 <= v <= 1.0:
                raise ValueError("salt_pepper density must be in [0, 1]")
            if self.kind == "saturation" and v < 0:
                raise ValueError("saturation clip level must be >= 0")
            if self.kind in ("gaussian", "uniform", "speckle", "poisson") and not -30.0 <= v <= 60.0:
                raise ValueError("target SNR must lie in [-30, 60] dB")
            if self.kind == "sloping_baseline" and abs(v) > 10.0:
                raise ValueError("baseline amplitude must be within 10 signal stds")


@dataclass
class MixSpec:
    motion_source: Record
    blend_fraction: float
    alignment_offset: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.blend_fraction <= 1.0:
            raise ValueError(f"blend_fraction must be in [0, 1], got {self.blend_fraction}")
        n = len(self.motion_source.samples)
        if n < SEG_LEN:
            raise ValueError(f"motion record has {n} samples, need at least {SEG_LEN}")
        if not 0 <= self.alignment_offset <= n - SEG_LEN:
            raise ValueError(f"alignment_offset {self.alignment_offset} leaves the motion record "
                             f"(valid range 0..{n - SEG_LEN})")


@dataclass
class GateResult:
    accepted: bool
    reason: str  # "ok" or the first failing criterion
    stats: Optional[hra.HRStats] = None
    ibis: np.ndarray = field(default_factory=lambda: np.empty(0))


# ---------------------------------------------------------------- ingestion

def ingest_csv(path, column: str, fs: float, subject_id: str | None = None,
               source: str = "bidmc-csv") -> Record:
    """Read one column of a headed CSV.  Unparseable or non-finite rows are dropped."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        if column not in names:
            raise KeyError(f"{path}: no column {column!r}; available columns: {names}")
        col = names.index(column)
        values, dropped = [], 0
        for row in reader:
            try:
                v = float(row[col])
            except (ValueError, IndexError):
                dropped += 1
                continue
            if math.isfinite(v):
                values.append(v)
            else:
                dropped += 1
    if not values:
        if dropped:
            raise ValueError(f"{path}: column {column!r} has no numeric values")
        raise ValueError(f"{path}: no data rows")
    return Record(subject_id or path.stem, float(fs), np.asarray(values), source, dropped)


def resample(r: Record, target_fs: float) -> Record:
    """Linear-interpolation downsampling onto a uniform grid starting at t=0."""
    if target_fs > r.fs:
        raise ValueError(f"upsampling is not supported ({r.fs} Hz -> {target_fs} Hz)")
    if target_fs == r.fs:
        return dataclasses.replace(r, samples=r.samples.copy())
    n_in = len(r.samples)
    n_out = max(int(round(n_in * target_fs / r.fs)), 1)
    t_out = np.arange(n_out) / target_fs
    t_in = np.arange(n_in) / r.fs
    return dataclasses.replace(r, fs=float(target_fs), samples=np.interp(t_out, t_in, r.samples))


def segment(r: Record, win: float = WIN_S, overlap: float = OVERLAP_S) -> list[np.ndarray]:
    n_win = int(round(win * r.fs))
    hop = int(round((win - overlap) * r.fs))
    if hop <= 0:
        raise ValueError("overlap must be shorter than the window")
    if len(r.samples) < n_win:
        raise ValueError(f"record {r.subject_id!r} is {r.duration:.2f} s, shorter than one {win} s window")
    count = (len(r.samples) - n_win) // hop + 1
    return [r.samples[i * hop:i * hop + n_win].copy() for i in range(count)]


def zscore(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sd = x.std(axis=-1, keepdims=True)
    return (x - x.mean(axis=-1, keepdims=True)) / np.where(sd > 0, sd, 1.0)


# ---------------------------------------------------------------- gating

def quality_gate(window, fs: float = FS) -> GateResult:
    try:
        beats = hra.detect_peaks(window, fs)
    except ValueError as exc:
        return GateResult(False, f"peak_detection: {exc}")
    ibis = beats.ibis
    if len(ibis) < 3:
        return GateResult(False, "too_few_beats", ibis=ibis)
    sd1, sd2, ratio = hra.poincare(ibis)
    stats = hra.HRStats(hra.bpm_from_ibis(ibis), hra.rmssd(ibis), sd1, sd2, ratio)
    if not BPM_GATE[0] < stats.bpm < BPM_GATE[1]:
        reason = "bpm"
    elif not np.all((ibis > IBI_GATE[0]) & (ibis < IBI_GATE[1])):
        reason = "ibi"
    elif not stats.rmssd < RMSSD_MAX:
        reason = "rmssd"
    elif not stats.sd1sd2 < SD_RATIO_MAX:
        reason = "sd1sd2"
    else:
        reason = "ok"
    return GateResult(reason == "ok", reason, stats, ibis)


# ---------------------------------------------------------------- contamination

def segment_rng(seed: int, subject_id: str, window_index: int, stream: int = 0) -> np.random.Generator:
    """Independent RNG stream per (global seed, subject, window)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(subject_id.encode()), int(window_index), int(stream)])
    return np.random.default_rng(ss)


def _clean_of(seg) -> np.ndarray:
    return np.asarray(seg.samples if isinstance(seg, Segment) else seg, dtype=float)


def _scale_to_snr(g, noise, snr):
    p_noise = np.mean(noise ** 2)
    if p_noise == 0:
        return noise
    return noise * np.sqrt(np.mean(g ** 2) / (p_noise * 10.0 ** (snr / 10.0)))


def default_intensity(kind: str, g: np.ndarray, rng: np.random.Generator) -> float:
    if kind in ("gaussian", "uniform", "speckle", "poisson"):
        return float(rng.uniform(0.0, 10.0))
    if kind == "sloping_baseline":
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0))
    if kind == "saturation":
        return float(np.percentile(np.abs(g), 90))
    if kind == "salt_pepper":
        return float(rng.uniform(0.005, 0.02))
    raise ValueError(f"unknown noise kind {kind!r}")


def add_synthetic_noise(seg, spec: NoiseSpec) -> np.ndarray:
    """Return the corrupted copy of a segment's clean samples."""
    g = _clean_of(seg)
    rng = np.random.default_rng(spec.rng_seed)
    level = spec.intensity if spec.intensity is not None else default_intensity(spec.kind, g, rng)
    kind = spec.kind
    if kind == "gaussian":
        return g + _scale_to_snr(g, rng.standard_normal(g.shape), level)
    if kind == "uniform":
        return g + _scale_to_snr(g, rng.uniform(-1.0, 1.0, g.shape), level)
    if kind == "speckle":
        return g + _scale_to_snr(g, g * rng.standard_normal(g.shape), level)
    if kind == "poisson":
        shifted = g - g.min()
        mean = shifted.mean()
        if mean == 0:
            return g.copy()
        # Poisson variance equals the mean: pick the photon scale giving the target SNR
        lam = mean * 10.0 ** (level / 10.0) / np.mean(g ** 2)
        return rng.poisson(shifted * lam) / lam + g.min()
    if kind == "sloping_baseline":
        return g + np.linspace(0.0, level * g.std(), len(g))
    if kind == "saturation":
        return np.clip(g, -level, level)
    if kind == "salt_pepper":
        out = g.copy()
        n_hit = int(round(level * len(g)))
        if n_hit:
            idx = rng.choice(len(g), size=n_hit, replace=False)
            out[idx] = np.where(rng.random(n_hit) < 0.5, g.min(), g.max())
        return out
    raise ValueError(f"unknown noise kind {kind!r}")


def blend_motion(seg, mix: MixSpec) -> np.ndarray:
    """Average the clean window with a motion window over a random contiguous span."""
    g = _clean_of(seg)
    motion = mix.motion_source.samples[mix.alignment_offset:mix.alignment_offset + len(g)]
    if len(motion) < len(g):
        raise ValueError("motion window is shorter than the segment")
    span = int(round(mix.blend_fraction * len(g)))
    out = g.copy()
    if span == 0:
        return out
    rng = np.random.default_rng(mix.rng_seed)
    start = int(rng.integers(0, len(g) - span + 1))
    sl = slice(start, start + span)
    out[sl] = (g[sl] + motion[sl]) / 2.0
    return out


# ---------------------------------------------------------------- splitting

def split_counts(n: int, ratios: Sequence[float] = (8, 1, 1)) -> tuple[int, int, int]:
    """(train, val, test) sizes: val and test are rounded, the remainder goes to train."""
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    total = float(sum(ratios))
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    return n - n_val - n_test, n_val, n_test


def split_dataset(segments: Sequence[Segment], ratios=(8, 1, 1), seed: int = 0,
                  subject_wise: bool = False) -> list[Segment]:
    """Tag every segment with a split; the input order is preserved.

    With ``subject_wise`` whole subjects are assigned (in shuffled order) to
    test, then val, until each reaches its target count.
    """
    segments = list(segments)
    n = len(segments)
    if n == 0:
        return []
    n_train, n_val, n_test = split_counts(n, ratios)
    rng = np.random.default_rng(seed)
    tags = [""] * n
    if not subject_wise:
        order = rng.permutation(n)
        for rank, i in enumerate(order):
            tags[i] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
    else:
        subjects = sorted({s.subject_id for s in segments})
        by_subject = {s: [i for i, seg in enumerate(segments) if seg.subject_id == s] for s in subjects}
        filled = {"test": 0, "val": 0}
        target = {"test": n_test, "val": n_val}
        for j in rng.permutation(len(subjects)):
            idx = by_subject[subjects[j]]
            tag = next((t for t in ("test", "val") if filled[t] < target[t]), "train")
            if tag != "train":
                filled[tag] += len(idx)
            for i in idx:
                tags[i] = tag
    return [dataclasses.replace(s, split=t) for s, t in zip(segments, tags)]


# ---------------------------------------------------------------- synthetic sources

def synth_beat_times(bpm: float, duration: float, rng: np.random.Generator, jitter: float = 0.015):
    """Beat onsets covering [-2T, duration + 2T]; intervals deviate from 60/bpm by at most ``jitter``."""
    T = 60.0 / bpm
    n = int(math.ceil(duration / T)) + 6
    k = np.arange(n)
    if jitter > 0:
        phase = rng.uniform(0, 2 * np.pi)
        period = rng.uniform(6.0, 10.0)
        dev = 0.85 * np.sin(2 * np.pi * k / period + phase) + 0.15 * rng.uniform(-1, 1, n)
        ibis = T * (1.0 + jitter * dev)
    else:
        ibis = np.full(n, T)
    start = -2 * T + (rng.uniform(0, T) if jitter > 0 else 0.0)
    return start + np.concatenate([[0.0], np.cumsum(ibis[:-1])]), ibis


def synth_clean_ppg(bpm: float, duration: float = WIN_S, fs: float = FS, seed: int = 0,
                    jitter: float = 0.015, subject_id: str | None = None) -> Record:
    """Quasi-periodic pulse wave: a systolic Gaussian plus a smaller dicrotic one per beat."""
    if not BPM_GATE[0] < bpm < BPM_GATE[1]:
        raise ValueError(f"bpm must be inside {BPM_GATE}, got {bpm}")
    if not 0 <= jitter < 0.02:
        raise ValueError("jitter must be in [0, 0.02)")
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(duration * fs))) / fs
    onsets, ibis = synth_beat_times(bpm, duration, rng, jitter)
    x = np.zeros_like(t)
    for t0, T in zip(onsets, ibis):
        x += np.exp(-0.5 * ((t - t0) / (0.12 * T)) ** 2)
        x += 0.3 * np.exp(-0.5 * ((t - t0 - 0.32 * T) / (0.12 * T)) ** 2)
    return Record(subject_id or f"synth-{seed}", fs, x, "synthetic")


def synth_motion(duration: float, fs: float = FS, seed: int = 0, subject_id: str | None = None) -> Record:
    """Stand-in for wrist motion artefacts: cadence harmonics, drift and
    amplitude-modulated broadband bursts, z-scored over the record."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    cadence = rng.uniform(1.0, 2.8)
    x = np.zeros(n)
    for h in (1, 2, 3):
        x += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * h * cadence * t + rng.uniform(0, 2 * np.pi))
    drift = np.cumsum(rng.standard_normal(n)) / np.sqrt(fs)
    x += 0.8 * (drift - drift.mean())
    env = np.convolve(rng.standard_normal(n) ** 2, np.ones(int(fs)) / fs, mode="same")
    x += 0.5 * env * rng.standard_normal(n)
    return Record(subject_id or f"motion-{seed}", fs, zscore(x), "synthetic")


def bandpass_baseline(signal, low: float = 0.5, high: float = 8.0, fs: float = FS,
                      numtaps: int = 256) -> np.ndarray:
    """Zero-phase FIR band-pass (Hamming windowed sinc), mean removed first.

    Edges are padded by reflection; odd extension turns a record that ends
    away from zero into a step the filter passes as a slow swell.
    """
    if not 0 < low < high < fs / 2:
        raise ValueError(f"need 0 < low < high < fs/2, got low={low}, high={high}, fs={fs}")
    x = np.asarray(signal, dtype=float)
    taps = sps.firwin(numtaps, [low, high], pass_zero=False, fs=fs, window="hamming")
    x = x - x.mean(axis=-1, keepdims=True)
    return sps.filtfilt(taps, [1.0], x, axis=-1, padlen=min(3 * numtaps, x.shape[-1] - 1),
                       padtype="even")
