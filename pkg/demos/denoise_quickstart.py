"""Train the desk-scale denoiser on synthetic segments and compare it with band-pass filtering.

Uses the same preset as the acceptance tests (``TrainConfig.desk()``),
about 7 minutes on one core.

Run:  python demos/denoise_quickstart.py
"""

import time

from ppgmamba import experiments
from ppgmamba.training import TrainConfig, train_dpnet, train_hrp

segs = experiments.desk_dataset(200, seed=0, profile="paper-default")
train, val, test = experiments.splits(segs)
print(f"segments: train {len(train)}  val {len(val)}  test {len(test)}")

cfg = TrainConfig.desk()

t0 = time.time()
hrp = train_hrp(train, val, cfg).checkpoint
print(f"HRP: best epoch {hrp.epoch}, val HR-MAE {hrp.metrics['val_hr_mae']:.2f} BPM ({time.time() - t0:.0f} s)")


def show(row):
    if row["epoch"] % 10 == 9:
        print(f"  epoch {row['epoch']:3d}  mse {row['l_mse']:.4f}  si-sdr {-row['l_sisdr']:6.2f} dB  "
              f"hr-mae {row['l_mae']:5.2f}  val mse {row['val_mse']:.4f}")


t0 = time.time()
res = train_dpnet(train, val, hrp, cfg, log=show)
print(f"DPNet: best epoch {res.checkpoint.epoch} ({time.time() - t0:.0f} s)")

model = experiments.score(res.checkpoint.params(cfg.np_dtype), test)
base = experiments.score_baseline(test)
print("\nDPNet on the test split")
print(model.table())
print("\nband-pass 0.5-8 Hz on the test split")
print(base.table())
