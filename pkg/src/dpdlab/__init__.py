"""Neural digital pre-distortion against virtual power amplifiers.

Modules: :mod:`iqsig` (waveforms, alignment, IQF1 files), :mod:`spectra`
(STFT, ACLR and error metrics), :mod:`vpa` (virtual PA presets),
:mod:`tinynet` (conv network engine), :mod:`losses`, :mod:`trainer`,
:mod:`mpdpd` (memory-polynomial baseline) and :mod:`cli`.
"""

__version__ = "0.1.0"
