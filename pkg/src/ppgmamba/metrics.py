"""Evaluation metrics and the staged training loss.

Plain-array metrics work on numpy vectors.  ``si_sdr_t`` and ``staged_loss``
are built from autodiff ops so they can be back-propagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DB_CLAMP = 100.0
# SI-SDR residual floor, relative to the projection energy so that scaling
# the estimate leaves the ratio unchanged; 1e-20 sits far past the clamp
SISDR_EPS = 1e-20
_ABS_GUARD = 1e-30  # keeps 0/0 finite for an all-zero estimate
HR_FAIL_SCORE = 110.0  # 150 - 40, the widest gap the BPM gate allows


def _pair(g, d):
    g = np.asarray(g, dtype=float)
    d = np.asarray(d, dtype=float)
    if g.shape != d.shape:
        raise ValueError(f"length mismatch: {g.shape} vs {d.shape}")
    return g, d


def mse(g, d) -> float:
    g, d = _pair(g, d)
    return float(np.mean((g - d) ** 2))


def cos_sim(g, d) -> float:
    g, d = _pair(g, d)
    ng, nd = np.linalg.norm(g), np.linalg.norm(d)
    if ng == 0 or nd == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(g, d) / (ng * nd), -1.0, 1.0))


def _clamped_db(num, den) -> float:
    if den <= 0 or num / den > 10 ** (DB_CLAMP / 10):
        return DB_CLAMP
    if num <= 0 or num / den < 10 ** (-DB_CLAMP / 10):
        return -DB_CLAMP
    return float(10.0 * np.log10(num / den))


def snr_db(s, g) -> float:
    """Residual SNR of ``s`` against reference ``g``, clamped to +-100 dB."""
    s, g = _pair(s, g)
    return _clamped_db(float(np.sum(g ** 2)), float(np.sum((s - g) ** 2)))


def snr_imp(d, n, g) -> float:
    return snr_db(d, g) - snr_db(n, g)


def si_sdr(d, g) -> float:
    d, g = _pair(d, g)
    g = g - g.mean()
    d = d - d.mean()
    gg = float(np.dot(g, g))
    if gg == 0:
        raise ValueError("SI-SDR reference is zero")
    if not np.any(d):
        return -DB_CLAMP
    s_t = np.dot(d, g) / gg * g
    e = d - s_t
    p_t = float(np.dot(s_t, s_t))
    return _clamped_db(p_t, float(np.dot(e, e)) + SISDR_EPS * p_t)


def hr_pair(g, d, fs: float):
    """HR of reference and estimate; ``None`` marks a detection failure."""
    from .hr import hr  # local import keeps the metrics module light

    def safe(x):
        try:
            return hr(x, fs)
        except ValueError:
            return None

    return safe(g), safe(d)


def hr_mae(g, d, fs: float) -> float | None:
    """|HR(g) - HR(d)|; None when HR(g) fails, 110 when only HR(d) fails."""
    hg, hd = hr_pair(g, d, fs)
    if hg is None:
        return None
    if hd is None:
        return HR_FAIL_SCORE
    return abs(hg - hd)


# ---------------------------------------------------------------- differentiable

def si_sdr_t(d: Tensor, g) -> Tensor:
    """Batch SI-SDR over the last axis, shape = leading dims of ``d``.

    The clamp at +-100 dB is applied as a clip so the gradient vanishes there.
    """
    d = ad._as_tensor(d)
    g = ad._as_tensor(g, like=d)
    g = ad.sub(g, ad.mean(g, axis=-1, keepdims=True))
    d = ad.sub(d, ad.mean(d, axis=-1, keepdims=True))
    gg = ad.sum(ad.mul(g, g), axis=-1, keepdims=True)
    if np.any(gg.data == 0):
        raise ValueError("SI-SDR reference is zero")
    scale = ad.div(ad.sum(ad.mul(d, g), axis=-1, keepdims=True), gg)
    s_t = ad.mul(scale, g)
    e = ad.sub(d, s_t)
    num = ad.sum(ad.mul(s_t, s_t), axis=-1)
    err = ad.sum(ad.mul(e, e), axis=-1)
    den = ad.add(ad.add(err, ad.mul(num, SISDR_EPS)), _ABS_GUARD)
    ratio = ad.div(ad.add(ad.add(num, ad.mul(err, SISDR_EPS)), _ABS_GUARD), den)
    db = ad.mul(ad.log(ratio), 10.0 / math.log(10.0))
    return ad.clip(db, -DB_CLAMP, DB_CLAMP)


@dataclass(frozen=True)
class LossWeights:
    lam1: float = 1e-4  # SI-SDR
    lam2: float = 1e-3  # HR-MAE
    E_w: int = 300

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0 or self.E_w < 0:
            raise ValueError("loss weights and warmup must be non-negative")


@dataclass
class LossParts:
    total: Tensor
    l_mse: float
    l_sisdr: float
    l_mae: float
    hr_active: bool


def staged_loss(epoch: int, g, d: Tensor, bpm_true=None, bpm_pred: Tensor | None = None,
                w: LossWeights = LossWeights()) -> LossParts:
    """MSE + lam1 * (-SI-SDR), plus lam2 * |bpm_true - bpm_pred| from epoch E_w on.

    The HR term is only evaluated when active, so ``bpm_pred`` may be None
    during warm-up.  |.| has subgradient 0 at 0.
    """
    d = ad._as_tensor(d)
    g = ad._as_tensor(g, like=d)
    diff = ad.sub(d, g)
    l_mse = ad.mean(ad.mul(diff, diff))
    l_sisdr = ad.neg(ad.mean(si_sdr_t(d, g)))
    total = ad.add(l_mse, ad.mul(l_sisdr, w.lam1))
    l_mae_val = 0.0
    active = epoch >= w.E_w
    if active:
        if bpm_pred is None or bpm_true is None:
            raise ValueError(f"epoch {epoch} >= E_w={w.E_w} needs bpm_true and bpm_pred")
        bpm_pred = ad._as_tensor(bpm_pred)
        l_mae = ad.mean(ad.absolute(ad.sub(bpm_pred, ad._as_tensor(bpm_true, like=bpm_pred))))
        total = ad.add(total, ad.mul(l_mae, w.lam2))
        l_mae_val = float(l_mae.data)
    return LossParts(total, float(l_mse.data), float(l_sisdr.data), l_mae_val, active)


# ---------------------------------------------------------------- aggregation

REPORT_KEYS = ("mse_e3_mean", "mse_e3_std", "cos_mean", "cos_std", "snrimp_db_mean",
               "snrimp_db_std", "hrmae_mean", "hrmae_std", "hr_fail_g", "hr_fail_d", "n_segments")


@dataclass
class SegmentScore:
    mse: float
    cos: float | None
    snr_imp: float
    hr_mae: float | None
    hr_fail_g: bool
    hr_fail_d: bool
    hr_fail_n: bool = False


@dataclass
class MetricReport:
    scores: list = field(default_factory=list)

    def add(self, g, n, d, fs: float = 125.0) -> SegmentScore:
        g, d = _pair(g, d)
        try:
            c = cos_sim(g, d)
        except ValueError:
            c = None
        hg, hd = hr_pair(g, d, fs)
        _, hn = hr_pair(g, n, fs)
        if hg is None:
            h = None
        else:
            h = HR_FAIL_SCORE if hd is None else abs(hg - hd)
        s = SegmentScore(mse(g, d), c, snr_imp(d, n, g), h, hg is None, hd is None, hn is None)
        self.scores.append(s)
        return s

    @staticmethod
    def _mean_std(vals):
        vals = [v for v in vals if v is not None]
        if not vals:
            return float("nan"), float("nan")
        a = np.asarray(vals, dtype=float)
        return float(a.mean()), float(a.std())  # population std

    def summary(self) -> dict:
        m, s = self._mean_std([x.mse * 1e3 for x in self.scores])
        cm, cs = self._mean_std([x.cos for x in self.scores])
        im, is_ = self._mean_std([x.snr_imp for x in self.scores])
        hm, hs = self._mean_std([x.hr_mae for x in self.scores])
        out = {
            "mse_e3_mean": m, "mse_e3_std": s,
            "cos_mean": cm, "cos_std": cs,
            "snrimp_db_mean": im, "snrimp_db_std": is_,
            "hrmae_mean": hm, "hrmae_std": hs,
            "hr_fail_g": sum(x.hr_fail_g for x in self.scores),
            "hr_fail_d": sum(x.hr_fail_d and not x.hr_fail_g for x in self.scores),
            "n_segments": len(self.scores),
        }
        assert tuple(out) == REPORT_KEYS
        return out

    def hr_fail_n(self) -> int:
        return sum(x.hr_fail_n for x in self.scores)

    def table(self) -> str:
        s = self.summary()
        return "\n".join([
            f"segments      {s['n_segments']}",
            f"MSE (x1e-3)   {s['mse_e3_mean']:.3f} +- {s['mse_e3_std']:.3f}",
            f"CoS           {s['cos_mean']:.3f} +- {s['cos_std']:.3f}",
            f"SNR_imp (dB)  {s['snrimp_db_mean']:.3f} +- {s['snrimp_db_std']:.3f}",
            f"HR-MAE (BPM)  {s['hrmae_mean']:.3f} +- {s['hrmae_std']:.3f}",
            f"HR failures   g={s['hr_fail_g']} n={self.hr_fail_n()} d={s['hr_fail_d']}",
        ])
