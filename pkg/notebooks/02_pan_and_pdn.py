# %% [markdown]
# # PAN and PDN end to end
#
# Stage 1 fits one conditional PA network (PAN) to three virtual-PA supply
# voltages. Stage 2 trains a pre-distortion network (PDN) through the frozen
# PAN. The PAN budget matches the acceptance suite and the PDN gets half of
# its epochs, about 20 minutes on one core. The PDN is sensitive to PAN
# quality: with a 45-epoch PAN it learns nothing useful.

# %%
import matplotlib.pyplot as plt
import numpy as np

from dpdlab import spectra
from dpdlab.iqsig import WaveformConfig, generate_frame
from dpdlab.trainer import (
    DeskScale,
    PanPlant,
    Target,
    TrainConfig,
    build_dataset,
    evaluate,
    train_pan,
    train_pdn,
)
from dpdlab.vpa import TRAIN_CONDITIONS

wave = WaveformConfig()
train = build_dataset(wave, range(100, 106), TRAIN_CONDITIONS)
holdout = build_dataset(wave, [1007], TRAIN_CONDITIONS)
test = [generate_frame(wave, 1007)]

# %% [markdown]
# ## Stage 1: PAN
#
# The condition is a one-hot channel block appended to the I/Q input.
# `eval_every` scores the PAN against the virtual PA on the held-out frame.

# %%
pan_cfg = TrainConfig(lr0=0.003, batch_pan=64, desk_scale=DeskScale(epochs=90, windows=6912, lr_decay_every=30))
pan = train_pan(train, pan_cfg, holdout=holdout, eval_every=30)
for rec in pan.history:
    if rec.snapshot:
        print(rec.epoch, {k: round(v["mse_dbc"], 1) for k, v in rec.snapshot.items()})

# %% [markdown]
# ## Stage 2: PDN through the frozen PAN
#
# The PDN gets no condition input. It sees the current block plus the
# previous transmitted block and the PA's response to it.

# %%
plant = PanPlant(pan.params, pan.extra["layout"])
frames = [x for x, _ in train[TRAIN_CONDITIONS[0]]]
pdn_cfg = TrainConfig(lr0=0.01, batch_pdn=64, desk_scale=DeskScale(epochs=60, windows=2304, lr_decay_every=20))
pdn = train_pdn(plant, frames, pdn_cfg)
print([round(r.loss.total, 2) for r in pdn.history][::5])

# %% [markdown]
# ## Scores on the held-out frame
#
# Through the PAN (what the PDN was trained against) and through the
# virtual PA itself. With this half-length PDN run only 4.0 V improves
# clearly (about 45 % OOB reduction through the PAN); the acceptance
# suite's 120-epoch run does much better at all three voltages.

# %%
for c in TRAIN_CONDITIONS:
    for name, target in (("pan", Target.pan(plant, c)), ("vpa", Target.vpa(c))):
        base = evaluate(None, target, c, test)
        rep = evaluate(pdn.params, target, c, test)
        print(f"{c.label} {name}: mse {base.mse_dbc:6.2f} -> {rep.mse_dbc:6.2f} dBc, "
              f"ACLR-H {base.aclr_h_db:5.1f} -> {rep.aclr_h_db:5.1f} dB, OOB {rep.oob_reduction_pct:5.1f} %")

# %% [markdown]
# ## Spectra at 4.0 V

# %%
c = TRAIN_CONDITIONS[0]
rep, sig = evaluate(pdn.params, Target.vpa(c), c, test, keep_signals=True)
fig, ax = plt.subplots(figsize=(8, 4))
for label, s in (("reference", sig.reference), ("no DPD", sig.no_dpd), ("PDN", sig.with_dpd)):
    f, p = spectra.welch_psd(s)
    ax.plot(f / 1e6, 10 * np.log10(p), label=label, lw=0.8)
ax.set_xlabel("frequency (MHz)")
ax.set_ylabel("PSD (dB)")
ax.legend()
