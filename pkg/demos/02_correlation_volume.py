"""Inspect the normalized correlation volume on a synthetic shifted pair.

Shows that for static content the volume concentrates on the "same
location" channel while shifted content peaks at the displaced location.

Run:  python demos/02_correlation_volume.py
"""
import numpy as np

from distinctnet.autodiff import DTensor
from distinctnet.correspond import global_correlation

rng = np.random.default_rng(3)

hf, wf, c = 6, 8, 16
feat_a = rng.standard_normal((1, c, hf, wf)).astype(np.float32)

# frame B: rows 0-3 stay put, rows 4-5 shift two columns to the right
feat_b = feat_a.copy()
feat_b[:, :, 4:6, :] = np.roll(feat_a[:, :, 4:6, :], 2, axis=3)

vol = global_correlation(DTensor(feat_a), DTensor(feat_b)).data[0]
print(f"correlation volume shape: {vol.shape}  (channels index B's locations)")
print(f"value range: [{vol.min():.3f}, {vol.max():.3f}] (bounded in [0,1])")

# for every A location, where does the best match in B sit?
best = vol.reshape(hf * wf, hf, wf).argmax(axis=0)
dx = (best % wf - np.arange(wf)[None, :].repeat(hf, 0) + wf) % wf
print("\ncolumn displacement of the best match per A location:")
for row in dx:
    print("  " + " ".join(f"{d:+d}" for d in row))
print("\nstatic rows match at displacement 0; the shifted rows at +2.")
