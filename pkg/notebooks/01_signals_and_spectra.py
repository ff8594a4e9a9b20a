# %% [markdown]
# # Signals, spectra and the virtual PA
#
# A default frame is 4 OFDM symbols of Gray-coded QPSK on 3276 subcarriers
# at 30 kHz spacing, sampled at 368.64 MHz. Each virtual PA preset is a
# memory polynomial with a soft output limiter; lower supply voltage means
# earlier compression and more spectral regrowth.

# %%
import matplotlib.pyplot as plt
import numpy as np

from dpdlab import spectra
from dpdlab.iqsig import WaveformConfig, generate_frame
from dpdlab.vpa import Freq, PaCondition, Voltage, pa_apply, pa_preset

wave = WaveformConfig()
x = generate_frame(wave, seed=7)
print(f"{len(x)} samples at {x.sample_rate_hz / 1e6:.2f} MHz, rms {x.rms():.3f}")

# %% [markdown]
# ## Band plan
#
# ACLR compares the in-band channel against 98.28 MHz-wide neighbours
# centred 100 MHz away on each side.

# %%
bp = spectra.DEFAULT_BANDS
print("in-band  ", bp.inband_lo_hz / 1e6, bp.inband_hi_hz / 1e6)
print("adjacent+", [f / 1e6 for f in bp.adjacent_high()])
print("adjacent-", [f / 1e6 for f in bp.adjacent_low()])

# %% [markdown]
# ## PA outputs per preset

# %%
conds = [PaCondition(Voltage.V4_0), PaCondition(Voltage.V4_2), PaCondition(Voltage.V4_6),
         PaCondition(Voltage.V4_0, drive_scale=1.122), PaCondition(Voltage.V4_0, Freq.F2643)]
outputs = {}
for c in conds:
    y = pa_apply(pa_preset(c), x)
    outputs[c.label] = y
    r = spectra.aclr(y)
    print(f"{c.label:14s} ACLR-H {r.aclr_high_db:6.2f} dB  ACLR-L {r.aclr_low_db:6.2f} dB")

# %% [markdown]
# The un-compensated ACLR rises with the supply voltage. Memory makes the
# two sides differ.

# %%
fig, ax = plt.subplots(figsize=(8, 4))
f, p = spectra.welch_psd(x)
ax.plot(f / 1e6, 10 * np.log10(p / p.max()), label="input", lw=0.8)
for label in ("v4.0-f2593", "v4.6-f2593"):
    f, p = spectra.welch_psd(outputs[label])
    ax.plot(f / 1e6, 10 * np.log10(p / p.max()), label=label, lw=0.8)
ax.set_xlabel("frequency (MHz)")
ax.set_ylabel("PSD (dB, peak = 0)")
ax.set_ylim(-90, 5)
ax.legend()

# %% [markdown]
# ## AM/AM of the most compressed preset

# %%
y = outputs["v4.0-f2593"]
fig, ax = plt.subplots(figsize=(5, 4))
ax.plot(np.abs(x.samples[::7]), np.abs(y.samples[::7]), ".", ms=1)
ax.set_xlabel("|x|")
ax.set_ylabel("|y|")
