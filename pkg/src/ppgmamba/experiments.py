"""Desk-scale experiments shared by the demos and the acceptance tests.

The loss ablation trains three denoisers per seed:

* ``mse``        MSE only
* ``mse_sisdr``  MSE + lam1 * SI-SDR
* ``full``       MSE + lam1 * SI-SDR + lam2 * HR-MAE after E_w

Before E_w the last two share the same loss, batches and initialisation, so
``full`` is resumed from the ``mse_sisdr`` state at epoch E_w instead of
being recomputed; this is bit-identical to a run from scratch.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import data, pipeline
from .metrics import MetricReport
from .training import TrainConfig, TrainData, TrainResult, denoise_batch, train_dpnet, train_hrp


def desk_dataset(n: int = 200, seed: int = 0, profile: str = "paper-default"):
    segs, summary = pipeline.prepare_synthetic(n, seed)
    motion = pipeline.prepare_motion(pipeline.synthetic_motion_records(seed))
    segs, _ = pipeline.contaminate(segs, profile, seed, motion)
    return segs


def splits(segments):
    return [TrainData.from_segments(segments, s) for s in data.SPLITS]


def score(params, test: TrainData) -> MetricReport:
    d = denoise_batch(params, test.noisy)
    rep = MetricReport()
    for g, n, x in zip(test.clean, test.noisy, d):
        rep.add(g, n, x)
    return rep


def score_baseline(test: TrainData) -> MetricReport:
    rep = MetricReport()
    for g, n in zip(test.clean, test.noisy):
        rep.add(g, n, data.bandpass_baseline(n))
    return rep


@dataclass
class RunOutcome:
    name: str
    seed: int
    result: TrainResult
    report: dict
    seconds: float


@dataclass
class Ablation:
    runs: list = field(default_factory=list)
    hrp_seconds: float = 0.0

    def hr_mae(self, name: str) -> list:
        return [r.report["hrmae_mean"] for r in self.runs if r.name == name]

    def median(self, name: str) -> float:
        return float(np.median(self.hr_mae(name)))


def run_seed(segments, seed: int, config: TrainConfig | None = None, log=None) -> tuple[list, float]:
    """All three ablation arms for one seed; returns (outcomes, hrp seconds)."""
    cfg = dataclasses.replace(config or TrainConfig.desk(), seed=seed)
    tr, va, te = splits(segments)
    t0 = time.time()
    hrp = train_hrp(tr, va, cfg).checkpoint
    hrp_s = time.time() - t0
    out = []

    def finish(name, res, t):
        rep = score(res.checkpoint.params(cfg.np_dtype), te).summary()
        out.append(RunOutcome(name, seed, res, rep, time.time() - t))
        if log:
            log(f"seed {seed} {name:10s} test HR-MAE {rep['hrmae_mean']:.3f}  "
                f"SNR_imp {rep['snrimp_db_mean']:.2f} dB  ({time.time() - t:.0f} s)")

    t = time.time()
    finish("mse", train_dpnet(tr, va, hrp, dataclasses.replace(cfg, lam1=0.0, lam2=0.0)), t)
    t = time.time()
    base = train_dpnet(tr, va, hrp, dataclasses.replace(cfg, lam2=0.0), branch_at=cfg.E_w)
    finish("mse_sisdr", base, t)
    t = time.time()
    if base.state is None:  # E_w beyond the schedule: the HR term never switches on
        full = train_dpnet(tr, va, hrp, cfg)
    else:
        full = train_dpnet(tr, va, hrp, cfg, resume=base.state)
    finish("full", full, t)
    return out, hrp_s


def ablation(segments, seeds=range(5), config: TrainConfig | None = None, log=None) -> Ablation:
    ab = Ablation()
    for s in seeds:
        outs, hs = run_seed(segments, s, config, log)
        ab.runs.extend(outs)
        ab.hrp_seconds += hs
    return ab
