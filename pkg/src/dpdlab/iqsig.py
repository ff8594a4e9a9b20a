"""Complex baseband I/Q signals: generation, normalization, alignment and IQF1 files."""

from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateInputError,
    FileFormatError,
    TruncatedFileError,
)

IQF_MAGIC = b"IQF1"
_IQF_HEADER = struct.Struct("<4sQd")

# Seeds feed numpy's Philox (counter-based, 64-bit keyed); pinned so datasets
# reproduce across machines.
PRNG_ALGORITHM = "philox4x64"


def make_rng(seed: int) -> np.random.Generator:
    """Return the pinned counter-based generator for ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class IqSignal:
    """Complex baseband samples (I = real, Q = imag) at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        s = np.asarray(self.samples)
        s = s.view() if np.iscomplexobj(s) else s.astype(np.complex128)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        if not (np.isfinite(self.sample_rate_hz) and self.sample_rate_hz > 0):
            raise ValueError("sample_rate_hz must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.abs(self.samples) ** 2)))

    def with_samples(self, samples) -> IqSignal:
        return IqSignal(samples, self.sample_rate_hz)

    def __mul__(self, scalar):
        return self.with_samples(self.samples * scalar)

    __rmul__ = __mul__


class Modulation(str, enum.Enum):
    QPSK = "QPSK"


@dataclass(frozen=True)
class WaveformConfig:
    """Simplified DFT-s-OFDM waveform parameters.

    The default preset is a 98.28 MHz uplink carrier (3276 sub-carriers at
    30 kHz) on a 12288-point grid, i.e. 368.64 MHz sampling.
    """

    fft_size: int = 12288
    occupied_subcarriers: int = 3276
    subcarrier_spacing_hz: float = 30e3
    num_ofdm_symbols: int = 4
    target_rms: float = 1.0
    modulation: Modulation = Modulation.QPSK

    def __post_init__(self):
        object.__setattr__(self, "modulation", Modulation(self.modulation))
        for name in ("fft_size", "occupied_subcarriers", "num_ofdm_symbols"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.occupied_subcarriers > self.fft_size:
            raise ConfigError("occupied_subcarriers exceeds fft_size")
        if not self.subcarrier_spacing_hz > 0:
            raise ConfigError("subcarrier_spacing_hz must be positive")
        if not self.target_rms > 0:
            raise ConfigError("target_rms must be positive")

    @property
    def sample_rate_hz(self) -> float:
        return self.fft_size * self.subcarrier_spacing_hz

    @property
    def occupied_bandwidth_hz(self) -> float:
        return self.occupied_subcarriers * self.subcarrier_spacing_hz

    @property
    def frame_length(self) -> int:
        return self.fft_size * self.num_ofdm_symbols

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modulation"] = self.modulation.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> WaveformConfig:
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown WaveformConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> WaveformConfig:
        return cls.from_dict(json.loads(text))


def qpsk_gray(bits: np.ndarray) -> np.ndarray:
    """Map bit pairs to Gray-coded QPSK points {±1±j}/√2."""
    b = np.asarray(bits, dtype=np.int8).reshape(-1, 2)
    return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / np.sqrt(2.0)


def occupied_bins(cfg: WaveformConfig) -> np.ndarray:
    """FFT bin indices (natural order) of the centered occupied sub-carriers."""
    k = np.arange(cfg.occupied_subcarriers) - cfg.occupied_subcarriers // 2
    return k % cfg.fft_size


def generate_frame(cfg: WaveformConfig, seed: int) -> IqSignal:
    """Generate one DFT-s-OFDM frame of QPSK data, deterministic in ``seed``.

    No cyclic prefix or reference symbols; symbols are concatenated directly
    and the whole frame is scaled to ``cfg.target_rms``.
    """
    rng = make_rng(seed)
    m = cfg.occupied_subcarriers
    bits = rng.integers(0, 2, size=(cfg.num_ofdm_symbols, 2 * m), dtype=np.int8)
    bins = occupied_bins(cfg)
    out = np.empty((cfg.num_ofdm_symbols, cfg.fft_size), dtype=np.complex128)
    for i in range(cfg.num_ofdm_symbols):
        spread = np.fft.fft(qpsk_gray(bits[i])) / np.sqrt(m)
        grid = np.zeros(cfg.fft_size, dtype=np.complex128)
        grid[bins] = spread
        out[i] = np.fft.ifft(grid)
    samples = out.ravel()
    samples *= cfg.target_rms / np.sqrt(np.mean(np.abs(samples) ** 2))
    return IqSignal(samples, cfg.sample_rate_hz)


def normalize_rms(sig: IqSignal, target_rms: float = 1.0) -> IqSignal:
    """Scale ``sig`` so that its RMS equals ``target_rms``; phase is untouched."""
    if not target_rms > 0:
        raise ValueError("target_rms must be positive")
    r = sig.rms()
    if r == 0:
        raise DegenerateInputError("cannot normalize an all-zero signal")
    return sig.with_samples(sig.samples * (target_rms / r))


@dataclass(frozen=True)
class AlignmentResult:
    """``measured ≈ gain·e^{i·phase}·roll(reference, delay)``."""

    delay_samples: int
    phase_rad: float
    gain: float

    @property
    def complex_gain(self) -> complex:
        return self.gain * np.exp(1j * self.phase_rad)


def align(reference: IqSignal, measured: IqSignal) -> AlignmentResult:
    """Estimate the circular delay and complex gain from ``reference`` to ``measured``.

    The delay is the lag with the largest circular cross-correlation
    magnitude, reported in ``(-N/2, N/2]``; gain and phase come from the
    least-squares fit of ``measured`` on the delayed reference.
    """
    if reference.sample_rate_hz != measured.sample_rate_hz:
        raise ValueError("sample rates differ")
    if len(reference) != len(measured):
        raise ValueError("lengths differ")
    r, m = reference.samples, measured.samples
    er = np.vdot(r, r).real
    if er == 0 or np.vdot(m, m).real == 0:
        raise DegenerateInputError("alignment needs nonzero power on both inputs")
    n = r.size
    xc = np.fft.ifft(np.fft.fft(m) * np.conj(np.fft.fft(r)))
    d = int(np.argmax(np.abs(xc)))
    if d > n // 2:
        d -= n
    rd = np.roll(r, d)
    g = np.vdot(rd, m) / er
    return AlignmentResult(d, float(np.angle(g)), float(abs(g)))


def apply_alignment(measured: IqSignal, result: AlignmentResult, *, gain: bool = True) -> IqSignal:
    """Undo a delay/phase (and optionally gain) offset found by :func:`align`."""
    g = result.complex_gain if gain else np.exp(1j * result.phase_rad)
    return measured.with_samples(np.roll(measured.samples, -result.delay_samples) / g)


def write_iq(sig: IqSignal, path) -> None:
    """Write ``sig`` as an IQF1 file (float32 interleaved payload)."""
    payload = np.empty(2 * len(sig), dtype="<f4")
    payload[0::2] = sig.samples.real
    payload[1::2] = sig.samples.imag
    with open(path, "wb") as fh:
        fh.write(_IQF_HEADER.pack(IQF_MAGIC, len(sig), sig.sample_rate_hz))
        fh.write(payload.tobytes())


def read_iq(path) -> IqSignal:
    """Read an IQF1 file; samples come back as complex64."""
    data = Path(path).read_bytes()
    if len(data) < _IQF_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, count, rate = _IQF_HEADER.unpack_from(data)
    if magic != IQF_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    need = _IQF_HEADER.size + 8 * count
    if len(data) < need:
        raise TruncatedFileError(f"{path}: header declares {count} samples, payload has {(len(data) - _IQF_HEADER.size) // 8}")
    if len(data) > need:
        raise FileFormatError(f"{path}: {len(data) - need} trailing bytes")
    payload = np.frombuffer(data, dtype="<f4", count=2 * count, offset=_IQF_HEADER.size)
    samples = payload.view("<c8").astype(np.complex64)
    return IqSignal(samples, rate)


def ls_gain(x, y) -> complex:
    """Complex least-squares gain ``g`` minimizing ``||y - g x||``."""
    x = x.samples if isinstance(x, IqSignal) else np.asarray(x)
    y = y.samples if isinstance(y, IqSignal) else np.asarray(y)
    ex = np.vdot(x, x).real
    if ex == 0:
        raise DegenerateInputError("zero-power input")
    return complex(np.vdot(x, y) / ex)


def small_signal_gain(apply, sig, level: float = 0.01) -> complex:
    """Least-squares gain of ``apply`` driven by ``sig`` scaled down to ``level``."""
    x = sig.samples if isinstance(sig, IqSignal) else np.asarray(sig)
    xs = x * level
    return ls_gain(xs, apply(xs))
