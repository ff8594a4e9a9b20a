"""Training objectives on batches of I/Q windows, each returning its exact gradient.

Signals are real tensors ``[batch, 2, length]`` (channel 0 = I, channel 1 = Q).
Gradients are taken with respect to the prediction ``x_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .spectra import DEFAULT_BANDS, LOSS_STFT, BandPlan, StftParams, frame_signal

EPS = 1e-12
DELTA = 1e-8
DEFAULT_RATE_HZ = 368.64e6
_DB = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class LossWeights:
    w_tmse: float = 1.0
    w_fmae: float = 1.0
    w_fspec: float = 1.0

    def __post_init__(self):
        ws = (self.w_tmse, self.w_fmae, self.w_fspec)
        if any(w < 0 for w in ws):
            raise ConfigError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ConfigError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return self.w_tmse, self.w_fmae, self.w_fspec


TMSE_ONLY = LossWeights(1.0, 0.0, 0.0)
ALL_LOSSES = LossWeights(1.0, 1.0, 1.0)


@dataclass(frozen=True)
class LossValue:
    total: float
    tmse: float
    fmae: float
    fspec: float

    @property
    def components(self) -> tuple[float, float, float]:
        return self.tmse, self.fmae, self.fspec


def _check(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape or x.ndim != 3 or x.shape[1] != 2:
        raise ShapeError(f"expected matching [batch, 2, length] tensors, got {x.shape} and {x_hat.shape}")
    return x, x_hat


def _complex(a: np.ndarray) -> np.ndarray:
    return a[:, 0].astype(np.float64) + 1j * a[:, 1].astype(np.float64)


def _real_grad(g: np.ndarray, dtype) -> np.ndarray:
    return np.stack([g.real, g.imag], axis=1).astype(dtype, copy=False)


def _spectrum(z: np.ndarray, p: StftParams) -> np.ndarray:
    """``[batch, length]`` -> ``[batch, frames, bins]``."""
    return np.fft.fft(frame_signal(z, p), axis=-1)


def _spectrum_adjoint(gx: np.ndarray, p: StftParams, length: int) -> np.ndarray:
    """Gradient w.r.t. time samples given the gradient w.r.t. STFT bins."""
    frames = p.window_len * np.fft.ifft(gx, axis=-1) * p.taps()
    out = np.zeros(gx.shape[:-2] + (length,), dtype=np.complex128)
    for k in range(gx.shape[-2]):
        out[..., k * p.hop : k * p.hop + p.window_len] += frames[..., k, :]
    return out


def tmse(x, x_hat) -> tuple[float, np.ndarray]:
    """``log(Σ ||x - x_hat||² + ε)`` over the whole batch."""
    x, x_hat = _check(x, x_hat)
    r = x - x_hat
    s = float(np.sum(r * r))
    return float(np.log(s + EPS)), (-2.0 * r / (s + EPS)).astype(x_hat.dtype, copy=False)


def fmae(x, x_hat, p: StftParams = LOSS_STFT) -> tuple[float, np.ndarray]:
    """``log(Σ |log(|STFT x| + δ) - log(|STFT x_hat| + δ)| + ε)`` over batch, frames and bins."""
    x, x_hat = _check(x, x_hat)
    if x.shape[-1] < p.window_len:
        raise ShapeError("window shorter than the STFT length")
    xs = _spectrum(_complex(x), p)
    ys = _spectrum(_complex(x_hat), p)
    ay = np.abs(ys)
    diff = np.log(np.abs(xs) + DELTA) - np.log(ay + DELTA)
    s = float(np.sum(np.abs(diff)))
    dmag = -np.sign(diff) / ((s + EPS) * (ay + DELTA))
    unit = np.divide(ys, ay, out=np.zeros_like(ys), where=ay > 0)
    g = _spectrum_adjoint(dmag * unit, p, x.shape[-1])
    return float(np.log(s + EPS)), _real_grad(g, x_hat.dtype)


def _band_sums(power: np.ndarray, masks) -> np.ndarray:
    total = power.reshape(-1, power.shape[-1]).sum(axis=0)
    return np.array([total[m].sum() for m in masks]) + DELTA**2


def _aclr_pair(psum: np.ndarray) -> np.ndarray:
    return _DB * np.log(psum[0] / psum[1:])


def fspec(x, x_hat, p: StftParams = LOSS_STFT, bp: BandPlan = DEFAULT_BANDS,
          sample_rate_hz: float = DEFAULT_RATE_HZ) -> tuple[float, np.ndarray]:
    """``Σ_sides |ACLR(x) - ACLR(x_hat)|`` in dB, with band powers pooled over the batch.

    At the absolute-value kink the subgradient is taken as 0.
    """
    x, x_hat = _check(x, x_hat)
    masks = bp.bin_masks(p.window_len, sample_rate_hz)
    xs = _spectrum(_complex(x), p)
    ys = _spectrum(_complex(x_hat), p)
    a_ref = _aclr_pair(_band_sums(np.abs(xs) ** 2, masks))
    py = _band_sums(np.abs(ys) ** 2, masks)
    a_hat = _aclr_pair(py)
    s = np.sign(a_hat - a_ref)
    inb, hi, lo = masks
    # d loss / d power, per bin
    c = _DB * ((s[0] + s[1]) * inb / py[0] - s[0] * hi / py[1] - s[1] * lo / py[2])
    g = _spectrum_adjoint(2.0 * c * ys, p, x.shape[-1])
    return float(np.sum(np.abs(a_hat - a_ref))), _real_grad(g, x_hat.dtype)


def combined(x, x_hat, weights: LossWeights = ALL_LOSSES, p: StftParams = LOSS_STFT,
             bp: BandPlan = DEFAULT_BANDS, sample_rate_hz: float = DEFAULT_RATE_HZ) -> tuple[LossValue, np.ndarray]:
    """Weighted sum of :func:`tmse`, :func:`fmae` and :func:`fspec` and its gradient."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    vt, gt = tmse(x, x_hat)
    vm, gm = fmae(x, x_hat, p)
    vs, gs = fspec(x, x_hat, p, bp, sample_rate_hz)
    wt, wm, ws = weights.as_tuple()
    total = wt * vt + wm * vm + ws * vs
    grad = wt * gt.astype(np.float64) + wm * gm + ws * gs
    return LossValue(total, vt, vm, vs), grad.astype(np.asarray(x_hat).dtype, copy=False)
