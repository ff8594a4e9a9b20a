# %% [markdown]
# # Memory-polynomial DPD
#
# The classical baseline: identify a post-inverse of the PA by least squares
# on the gain-normalized output, then place it in front of the PA (indirect
# learning). On a PA that is itself a memory polynomial the inverse is close
# to exact; on a saturating PA it runs out of headroom.

# %%
import numpy as np

from dpdlab import spectra
from dpdlab.iqsig import WaveformConfig, generate_frame, small_signal_gain
from dpdlab.mpdpd import mp_apply, mp_fit_postinverse
from dpdlab.trainer import Target, evaluate
from dpdlab.vpa import PaCondition, Voltage, mp_oracle_preset, pa_apply

wave = WaveformConfig()
train = [generate_frame(wave, s) for s in (100, 101)]
test = generate_frame(wave, 1007)

# %% [markdown]
# ## Matched case: MP preset without saturation

# %%
pa = mp_oracle_preset()
x = np.concatenate([f.samples for f in train])
coeffs = mp_fit_postinverse(x, pa_apply(pa, x), memory_depth=3, order=5)

g0 = small_signal_gain(lambda s: pa_apply(pa, s), test.samples)
y0 = pa_apply(pa, test)
y = pa_apply(pa, mp_apply(coeffs, test))
print(f"no DPD  mse {spectra.mse_dbc(test * g0, y0):7.2f} dBc")
print(f"MP-DPD  mse {spectra.mse_dbc(test * g0, y):7.2f} dBc")

# %% [markdown]
# ## Saturating presets
#
# `evaluate` runs the held-out frame through DPD and PA and reports error,
# ACLR and the share of out-of-band excess removed.

# %%
for v in Voltage:
    c = PaCondition(v)
    target = Target.vpa(c)
    ys = [target.apply(f.samples) for f in train]
    mp = mp_fit_postinverse(x, np.concatenate(ys), 3, 5)
    base = evaluate(None, target, c, [test])
    rep = evaluate(mp, target, c, [test])
    print(f"{c.label}: ACLR-H {base.aclr_h_db:5.1f} -> {rep.aclr_h_db:5.1f} dB, "
          f"ACLR-L {base.aclr_l_db:5.1f} -> {rep.aclr_l_db:5.1f} dB, OOB reduction {rep.oob_reduction_pct:5.1f} %")
