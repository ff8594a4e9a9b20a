"""STFT, Welch PSD and the spectral metrics: ACLR, MSE in dBc, out-of-band reduction."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInputError, SizeError, UndefinedBaselineError
from .iqsig import IqSignal

MSE_FLOOR_DB = -160.0
REPORT_COLUMNS = ("mse_dbc", "aclr_h_db", "aclr_l_db", "oob_reduction_pct")


class Window(str, enum.Enum):
    RECTANGULAR = "Rectangular"
    HANN = "Hann"


@dataclass(frozen=True)
class StftParams:
    window_len: int
    hop: int
    window: Window = Window.RECTANGULAR

    def __post_init__(self):
        object.__setattr__(self, "window", Window(self.window))
        if self.window_len <= 0 or self.hop <= 0:
            raise ValueError("window_len and hop must be positive")
        if self.hop > self.window_len:
            raise ValueError("hop must not exceed window_len")

    def taps(self, dtype=np.float64) -> np.ndarray:
        if self.window is Window.HANN:
            # periodic Hann: exact COLA at hop = window_len / 2
            n = np.arange(self.window_len)
            return (0.5 - 0.5 * np.cos(2 * np.pi * n / self.window_len)).astype(dtype)
        return np.ones(self.window_len, dtype=dtype)

    def num_frames(self, n: int) -> int:
        if n < self.window_len:
            raise SizeError(f"signal of length {n} shorter than window {self.window_len}")
        return (n - self.window_len) // self.hop + 1


# Training losses look at one full 128-sample network window; evaluation uses
# a finer, lower-variance Hann/Welch estimate.
LOSS_STFT = StftParams(128, 128, Window.RECTANGULAR)
EVAL_STFT = StftParams(1024, 512, Window.HANN)


@dataclass(frozen=True)
class SpectrumFrames:
    """STFT output: ``frames[k, m]`` is bin ``m`` (natural FFT order) of frame ``k``."""

    frames: np.ndarray
    bin_hz: float

    def freqs(self) -> np.ndarray:
        w = self.frames.shape[-1]
        return np.fft.fftfreq(w, d=1.0 / (w * self.bin_hz))

    def power(self) -> np.ndarray:
        """Per-bin power summed over frames."""
        return np.sum(np.abs(self.frames) ** 2, axis=0)


def frame_signal(x: np.ndarray, p: StftParams) -> np.ndarray:
    """Windowed frames of the last axis: ``[..., num_frames, window_len]``."""
    k = p.num_frames(x.shape[-1])
    view = np.lib.stride_tricks.sliding_window_view(x, p.window_len, axis=-1)
    return view[..., : (k - 1) * p.hop + 1 : p.hop, :] * p.taps(x.real.dtype)


def stft(sig, p: StftParams) -> SpectrumFrames:
    """Short-time Fourier transform of an :class:`IqSignal` (or bare array with unit rate)."""
    if isinstance(sig, IqSignal):
        x, fs = sig.samples, sig.sample_rate_hz
    else:
        x, fs = np.asarray(sig), 1.0
    frames = np.fft.fft(frame_signal(x, p), axis=-1)
    return SpectrumFrames(frames, fs / p.window_len)


def welch_psd(sig: IqSignal, p: StftParams = EVAL_STFT) -> tuple[np.ndarray, np.ndarray]:
    """Averaged periodogram, fft-shifted so frequencies increase over [-fs/2, fs/2).

    Returns:
        ``(freq_hz, psd)`` with psd in power per Hz.
    """
    spec = stft(sig, p)
    w = p.taps()
    psd = np.mean(np.abs(spec.frames) ** 2, axis=0) / (sig.sample_rate_hz * np.sum(w**2))
    return np.fft.fftshift(spec.freqs()), np.fft.fftshift(psd)


@dataclass(frozen=True)
class BandPlan:
    """In-band channel plus one adjacent channel on each side.

    Adjacent channels are ``adj_bw_hz`` wide and centered ``±adj_offset_hz``
    from the in-band center. Bins belong to a band when their center
    frequency lies inside it (edges inclusive).
    """

    inband_lo_hz: float = -49.14e6
    inband_hi_hz: float = 49.14e6
    adj_offset_hz: float = 100e6
    adj_bw_hz: float = 98.28e6

    def __post_init__(self):
        if not self.inband_lo_hz < self.inband_hi_hz:
            raise ValueError("inband_lo_hz must be below inband_hi_hz")
        if self.adj_bw_hz <= 0:
            raise ValueError("adj_bw_hz must be positive")
        hl, lh = self.adjacent_high()[0], self.adjacent_low()[1]
        if hl <= self.inband_hi_hz or lh >= self.inband_lo_hz:
            raise ValueError("adjacent bands overlap the in-band channel")

    @property
    def center_hz(self) -> float:
        return 0.5 * (self.inband_lo_hz + self.inband_hi_hz)

    def adjacent_high(self) -> tuple[float, float]:
        c = self.center_hz + self.adj_offset_hz
        return c - self.adj_bw_hz / 2, c + self.adj_bw_hz / 2

    def adjacent_low(self) -> tuple[float, float]:
        c = self.center_hz - self.adj_offset_hz
        return c - self.adj_bw_hz / 2, c + self.adj_bw_hz / 2

    @property
    def highest_edge_hz(self) -> float:
        return max(abs(self.adjacent_low()[0]), abs(self.adjacent_high()[1]))

    def check_rate(self, sample_rate_hz: float) -> None:
        if not sample_rate_hz > 2 * self.highest_edge_hz:
            raise ValueError(
                f"sample rate {sample_rate_hz:g} Hz too low for band edge {self.highest_edge_hz:g} Hz"
            )

    def masks(self, freqs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Boolean (in-band, adjacent-high, adjacent-low) masks over bin frequencies."""

        def inside(band):
            return (freqs >= band[0]) & (freqs <= band[1])

        return (
            inside((self.inband_lo_hz, self.inband_hi_hz)),
            inside(self.adjacent_high()),
            inside(self.adjacent_low()),
        )

    def bin_masks(self, window_len: int, sample_rate_hz: float):
        self.check_rate(sample_rate_hz)
        return self.masks(np.fft.fftfreq(window_len, d=1.0 / sample_rate_hz))


DEFAULT_BANDS = BandPlan()


def band_powers(sig: IqSignal, p: StftParams, bp: BandPlan) -> tuple[float, float, float]:
    """STFT power summed over all frames in (in-band, adjacent-high, adjacent-low)."""
    power = stft(sig, p).power()
    inb, hi, lo = bp.bin_masks(p.window_len, sig.sample_rate_hz)
    return float(power[inb].sum()), float(power[hi].sum()), float(power[lo].sum())


def _ratio_db(num: float, den: float) -> tuple[float, str | None]:
    if num == 0:
        return -math.inf, "zero in-band power"
    if den == 0:
        return math.inf, "zero adjacent-band power"
    return 10.0 * math.log10(num / den), None


@dataclass(frozen=True)
class AclrReport:
    """Upper/lower adjacent-channel leakage ratios in dB (positive = in-band dominates)."""

    aclr_high_db: float
    aclr_low_db: float
    flags: tuple[str, ...] = ()

    @property
    def finite(self) -> bool:
        return not self.flags

    def to_json(self) -> str:
        return json.dumps({"aclr_h_db": self.aclr_high_db, "aclr_l_db": self.aclr_low_db, "flags": list(self.flags)})

    def to_csv_row(self) -> list:
        return ["", self.aclr_high_db, self.aclr_low_db, ""]


def aclr(sig: IqSignal, p: StftParams = EVAL_STFT, bp: BandPlan = DEFAULT_BANDS) -> AclrReport:
    """Adjacent channel leakage ratio on both sides from STFT band-power sums.

    Infinite values are sentinels for empty bands and are listed in ``flags``.
    """
    pin, phi, plo = band_powers(sig, p, bp)
    hi, fh = _ratio_db(pin, phi)
    lo, fl = _ratio_db(pin, plo)
    flags = tuple(f"{side}: {f}" for side, f in (("high", fh), ("low", fl)) if f)
    return AclrReport(hi, lo, flags)


def _as_samples(sig) -> np.ndarray:
    return sig.samples if isinstance(sig, IqSignal) else np.asarray(sig)


def mse_dbc(reference, test) -> float:
    """Time-domain error power relative to the carrier, after RMS-normalizing both signals.

    Clamped at -160 dB.
    """
    r, t = _as_samples(reference).astype(np.complex128), _as_samples(test).astype(np.complex128)
    if r.shape != t.shape:
        raise ValueError("reference and test lengths differ")
    if (isinstance(reference, IqSignal) and isinstance(test, IqSignal)
            and reference.sample_rate_hz != test.sample_rate_hz):
        raise ValueError("sample rates differ")
    pr, pt = np.vdot(r, r).real, np.vdot(t, t).real
    if pr == 0:
        raise DegenerateInputError("reference has zero power")
    if pt == 0:
        raise DegenerateInputError("test signal has zero power")
    r = r / np.sqrt(pr / r.size)
    t = t / np.sqrt(pt / t.size)
    err = np.sum(np.abs(t - r) ** 2) / np.sum(np.abs(r) ** 2)
    if err <= 0:
        return MSE_FLOOR_DB
    return max(MSE_FLOOR_DB, 10.0 * math.log10(err))


class OobReduction(NamedTuple):
    """Out-of-band reduction in percent; ``raw_pct`` is the unclamped value."""

    pct: float
    raw_pct: float
    out_of_range: bool


def oob_excess(sig: IqSignal, reference: IqSignal, p: StftParams, bp: BandPlan) -> float:
    """Adjacent-band power above the reference once both share the reference's in-band power."""
    rin, rhi, rlo = band_powers(reference, p, bp)
    sin_, shi, slo = band_powers(sig, p, bp)
    if rin == 0 or sin_ == 0:
        raise DegenerateInputError("in-band power is zero")
    return max(0.0, (shi + slo) * (rin / sin_) - (rhi + rlo))


def oob_reduction(
    no_dpd: IqSignal,
    with_dpd: IqSignal,
    reference: IqSignal,
    p: StftParams = EVAL_STFT,
    bp: BandPlan = DEFAULT_BANDS,
) -> OobReduction:
    """Share of the un-compensated out-of-band excess removed by pre-distortion.

    The excess of a signal is its combined adjacent-band power minus that of
    the ideal reference, measured at equal in-band power. 100 % means the
    compensated output leaks no more than the reference, 0 % means no
    improvement. Values outside [0, 100] are clamped and flagged.
    """
    if not len(no_dpd) == len(with_dpd) == len(reference):
        raise ValueError("signal lengths differ")
    if not no_dpd.sample_rate_hz == with_dpd.sample_rate_hz == reference.sample_rate_hz:
        raise ValueError("sample rates differ")
    e_without = oob_excess(no_dpd, reference, p, bp)
    if e_without == 0:
        raise UndefinedBaselineError("un-compensated signal has no out-of-band excess")
    e_with = oob_excess(with_dpd, reference, p, bp)
    raw = 100.0 * (1.0 - e_with / e_without)
    pct = min(100.0, max(0.0, raw))
    return OobReduction(pct, raw, pct != raw)
