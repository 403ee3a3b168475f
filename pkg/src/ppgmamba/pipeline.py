"""Dataset assembly: records -> gated segments -> split -> contaminated pairs."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import data
from .data import FS, MixSpec, NoiseSpec, Record, Segment

PROFILES = ("none", "paper-default", "synthetic-only", "motion-only")
SYNTH_BPM = (50.0, 120.0)


@dataclass
class GateSummary:
    accepted: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "rejected": self.rejected,
                "reasons": dict(sorted(self.reasons.items()))}


def gate_record(r: Record, summary: GateSummary | None = None) -> list[Segment]:
    """Resample to 125 Hz, window, gate.  Accepted windows are z-scored."""
    summary = summary if summary is not None else GateSummary()
    if r.fs != FS:
        r = data.resample(r, FS)
    out = []
    for i, w in enumerate(data.segment(r)):
        res = data.quality_gate(w, FS)
        if res.accepted:
            summary.accepted += 1
            out.append(Segment(data.zscore(w), res.stats.bpm, r.subject_id, i))
        else:
            summary.rejected += 1
            summary.reasons[res.reason.split(":")[0]] += 1
    return out


def prepare_records(records, seed: int = 0, ratios=(8, 1, 1), subject_wise: bool = False):
    summary = GateSummary()
    segs = []
    for r in records:
        segs.extend(gate_record(r, summary))
    if not segs:
        raise ValueError("zero segments passed the quality gate")
    return data.split_dataset(segs, ratios, seed, subject_wise), summary


def synthetic_records(n: int, seed: int = 0, bpm_range=SYNTH_BPM) -> list[Record]:
    """``n`` single-window synthetic recordings with heart rates drawn from ``bpm_range``."""
    rng = np.random.default_rng([seed, 0x5EED])
    bpms = rng.uniform(*bpm_range, size=n)
    seeds = rng.integers(0, 2**31, size=n)
    return [data.synth_clean_ppg(float(b), data.WIN_S, FS, int(s), subject_id=f"synth-{i:05d}")
            for i, (b, s) in enumerate(zip(bpms, seeds))]


def prepare_synthetic(n: int, seed: int = 0, ratios=(8, 1, 1), subject_wise: bool = False):
    """Exactly ``n`` gated synthetic segments; rejected draws are replaced."""
    if n < 1:
        raise ValueError("need at least one synthetic segment")
    summary = GateSummary()
    segs: list[Segment] = []
    records = synthetic_records(2 * n + 10, seed)
    for r in records:
        segs.extend(gate_record(r, summary))
        if len(segs) == n:
            break
    if len(segs) < n:
        raise ValueError(f"only {len(segs)} of {n} synthetic segments passed the quality gate")
    return data.split_dataset(segs, ratios, seed, subject_wise), summary


def synthetic_motion_records(seed: int = 0, count: int = 4, duration: float = 60.0) -> list[Record]:
    return [data.synth_motion(duration, FS, seed=int(s), subject_id=f"motion-{i}")
            for i, s in enumerate(np.random.default_rng([seed, 0x40710]).integers(0, 2**31, count))]


def prepare_motion(records) -> list[Record]:
    """Motion sources at 125 Hz, z-scored over the whole record."""
    out = []
    for r in records:
        r = data.resample(r, FS) if r.fs != FS else r
        if len(r.samples) < data.SEG_LEN:
            raise ValueError(f"motion record {r.subject_id!r} is shorter than one window")
        out.append(dataclasses.replace(r, samples=data.zscore(r.samples)))
    return out


def contaminate_segment(seg: Segment, profile: str, seed: int, motion: list[Record] | None):
    """Return (noisy, provenance) for one segment."""
    if profile == "none":
        return seg.samples.copy(), {"noise": None, "motion": None}
    rng = data.segment_rng(seed, seg.subject_id, seg.window_index, stream=1)
    noisy = seg.samples.copy()
    prov = {"noise": None, "motion": None}
    if profile in ("paper-default", "synthetic-only"):
        spec = NoiseSpec(str(rng.choice(data.NOISE_KINDS)), None, int(rng.integers(0, 2**63)))
        noisy = data.add_synthetic_noise(seg, spec)
        prov["noise"] = {"kind": spec.kind, "rng_seed": spec.rng_seed}
    want_motion = profile == "motion-only" or (profile == "paper-default" and rng.random() < 0.5)
    if want_motion:
        if not motion:
            raise ValueError(f"profile {profile!r} needs motion records")
        k = int(rng.integers(len(motion)))
        src = motion[k]
        mix = MixSpec(src, float(rng.uniform(0.0, 1.0)),
                      int(rng.integers(0, len(src.samples) - data.SEG_LEN + 1)), int(rng.integers(0, 2**63)))
        noisy = data.blend_motion(noisy, mix)
        prov["motion"] = {"source": src.subject_id, "blend_fraction": mix.blend_fraction,
                          "alignment_offset": mix.alignment_offset, "rng_seed": mix.rng_seed}
    return noisy, prov


def contaminate(segments, profile: str = "paper-default", seed: int = 0, motion=None):
    if profile not in PROFILES:
        raise ValueError(f"unknown noise profile {profile!r}; expected one of {PROFILES}")
    out, prov = [], []
    for s in segments:
        noisy, p = contaminate_segment(s, profile, seed, motion)
        out.append(dataclasses.replace(s, noisy=noisy))
        prov.append({"subject_id": s.subject_id, "window_index": s.window_index, **p})
    return out, prov
