"""Loss ablation at desk scale: MSE, MSE + SI-SDR, and MSE + SI-SDR + HR-MAE.

Each seed trains one HRP and three denoisers with the desk preset, roughly
12 minutes per seed on one core.

Run:  python demos/loss_ablation.py [n_seeds]
"""

import sys
import time

from ppgmamba import experiments

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 1
t0 = time.time()
segs = experiments.desk_dataset(200, seed=0)
ab = experiments.ablation(segs, range(n_seeds), log=lambda m: print(f"[{time.time() - t0:6.0f} s] {m}"))

print("\narm         test HR-MAE per seed          median")
for arm in ("mse", "mse_sisdr", "full"):
    vals = ab.hr_mae(arm)
    print(f"{arm:10s}  {' '.join(f'{v:6.3f}' for v in vals):28s}  {ab.median(arm):.3f}")
