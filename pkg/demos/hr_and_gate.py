"""Heart-rate extraction and the quality gate on synthetic windows.

Run:  python demos/hr_and_gate.py
"""

import numpy as np

from ppgmamba import data, hr

FS = data.FS

print("bpm  estimate  gate")
for bpm in (45, 60, 75, 90, 120, 145):
    x = data.synth_clean_ppg(float(bpm), seed=bpm).samples
    res = data.quality_gate(x)
    print(f"{bpm:3d}  {hr.hr(x, FS):8.2f}  {res.reason}")

# a 160 BPM window: the same pulse shape played back twice as fast
fast = data.synth_clean_ppg(80.0, duration=12.0, seed=1).samples[::2]
print(f"160  {hr.hr(fast, FS):8.2f}  {data.quality_gate(fast).reason}")

# beat statistics used by the gate
x = data.synth_clean_ppg(70.0, seed=3).samples
beats = hr.detect_peaks(x, FS)
sd1, sd2, ratio = hr.poincare(beats.ibis)
print()
print("peaks at", beats.peak_indices.tolist())
print("IBIs (ms)", np.round(beats.ibis, 1).tolist())
print(f"RMSSD {hr.rmssd(beats.ibis):.1f} ms  SD1 {sd1:.1f}  SD2 {sd2:.1f}  SD1/SD2 {ratio:.2f}")

# broadband noise adds spurious peaks; the estimate drifts, then detection fails
rng = np.random.default_rng(0)
print()
for snr in (40, 30, 20, 10):
    noise = rng.standard_normal(len(x))
    noise *= np.sqrt(np.mean(x ** 2) / (np.mean(noise ** 2) * 10 ** (snr / 10)))
    y = x + noise
    try:
        est = f"{hr.hr(y, FS):6.1f}"
    except hr.PeakDetectionError:
        est = "  fail"
    print(f"SNR {snr:2d} dB: HR {est}  gate {data.quality_gate(y).reason}")
