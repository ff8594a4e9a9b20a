"""Virtual power amplifier: a memory polynomial followed by an optional smooth limiter.

Stands in for measured hardware. Each :class:`PaCondition` selects a pinned
coefficient set, so every downstream number is reproducible.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace

import numpy as np

from .iqsig import IqSignal


class Voltage(str, enum.Enum):
    V4_0 = "v4.0"
    V4_2 = "v4.2"
    V4_6 = "v4.6"


class Freq(str, enum.Enum):
    F2593 = "f2593"
    F2643 = "f2643"


# 1.0 is the nominal 24 dBm drive; +1 dB in power scales amplitude by 1.122.
DRIVE_24DBM = 1.0
DRIVE_25DBM = 1.122


@dataclass(frozen=True)
class PaCondition:
    voltage: Voltage = Voltage.V4_0
    freq: Freq = Freq.F2593
    drive_scale: float = DRIVE_24DBM

    def __post_init__(self):
        object.__setattr__(self, "voltage", Voltage(self.voltage))
        object.__setattr__(self, "freq", Freq(self.freq))
        if not (np.isfinite(self.drive_scale) and self.drive_scale > 0):
            raise ValueError("drive_scale must be finite and positive")

    @property
    def label(self) -> str:
        s = f"{self.voltage.value}-{self.freq.value}"
        if self.drive_scale != DRIVE_24DBM:
            s += f"-d{self.drive_scale:g}"
        return s

    def to_dict(self) -> dict:
        return {"voltage": self.voltage.value, "freq": self.freq.value, "drive_scale": self.drive_scale}

    @classmethod
    def from_dict(cls, d: dict) -> PaCondition:
        return cls(d["voltage"], d.get("freq", Freq.F2593), d.get("drive_scale", DRIVE_24DBM))

    @classmethod
    def parse(cls, text: str) -> PaCondition:
        """Parse labels such as ``v4.0``, ``v4.2-f2643`` or ``v4.0-f2593-d1.122``."""
        parts = text.lower().split("-")
        kw = {"voltage": Voltage(parts[0])}
        for p in parts[1:]:
            if p.startswith("f"):
                kw["freq"] = Freq(p)
            elif p.startswith("d"):
                kw["drive_scale"] = float(p[1:])
            else:
                raise ValueError(f"bad condition label {text!r}")
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class PaModel:
    """``y(n) = sat(Σ_m Σ_k a[m, k] x(n-m) |x(n-m)|^(k-1))``.

    ``coeffs`` has shape ``(memory_depth + 1, len(orders))``; ``a_sat`` enables the
    limiter ``r / (1 + (r / a_sat)^4)^(1/4)`` on the output magnitude.
    """

    memory_depth: int
    orders: tuple[int, ...]
    coeffs: np.ndarray
    a_sat: float | None = None

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        orders = tuple(int(k) for k in self.orders)
        if not 0 <= self.memory_depth <= 8:
            raise ValueError("memory_depth must lie in [0, 8]")
        if c.shape != (self.memory_depth + 1, len(orders)):
            raise ValueError(f"coeffs shape {c.shape} does not match depth/orders")
        if any(k < 1 or k % 2 == 0 for k in orders):
            raise ValueError("orders must be odd and positive")
        if 1 not in orders or c[0, orders.index(1)] == 0:
            raise ValueError("linear gain a[0, 1] must be nonzero")
        if self.a_sat is not None and not self.a_sat > 0:
            raise ValueError("a_sat must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "orders", orders)

    @property
    def linear_gain(self) -> complex:
        return complex(self.coeffs[0, self.orders.index(1)])

    def without_saturation(self) -> PaModel:
        return replace(self, a_sat=None)

    def truncated(self, memory_depth: int, orders) -> PaModel:
        """Keep only taps ``<= memory_depth`` and the listed ``orders``."""
        cols = [self.orders.index(k) for k in orders]
        return replace(self, memory_depth=memory_depth, orders=tuple(orders),
                       coeffs=self.coeffs[: memory_depth + 1][:, cols])

    def scaled_input(self, drive: float) -> PaModel:
        """Equivalent model for an input pre-multiplied by ``drive``."""
        powers = np.asarray(self.orders, dtype=float)
        return replace(self, coeffs=self.coeffs * drive**powers)

    def to_dict(self) -> dict:
        inter = np.stack([self.coeffs.real, self.coeffs.imag], axis=-1)
        return {
            "memory_depth": self.memory_depth,
            "orders": list(self.orders),
            "coeffs": inter.reshape(self.memory_depth + 1, -1).tolist(),
            "saturation": None if self.a_sat is None else {"a_sat": self.a_sat},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> PaModel:
        inter = np.asarray(d["coeffs"], dtype=float).reshape(d["memory_depth"] + 1, -1, 2)
        sat = d.get("saturation")
        return cls(d["memory_depth"], tuple(d["orders"]), inter[..., 0] + 1j * inter[..., 1],
                   None if sat is None else sat["a_sat"])

    @classmethod
    def from_json(cls, text: str) -> PaModel:
        return cls.from_dict(json.loads(text))


def soft_limit(y: np.ndarray, a_sat: float) -> np.ndarray:
    m = np.abs(y) / a_sat
    # (1 + m^4)^(1/4) via hypot so large drive does not overflow
    return y / np.sqrt(np.hypot(1.0, m * m))


def pa_apply(model: PaModel, sig):
    """Run a signal (``IqSignal`` or complex array) through the virtual PA.

    Samples before the start are taken as zero, so the output is causal.
    """
    x = sig.samples if isinstance(sig, IqSignal) else np.asarray(sig)
    x = x.astype(np.complex128)
    y = np.zeros_like(x)
    env = np.abs(x)
    for j, k in enumerate(model.orders):
        basis = x if k == 1 else x * env ** (k - 1)
        for m in range(model.memory_depth + 1):
            a = model.coeffs[m, j]
            if a == 0 or m >= x.size:
                continue
            if m == 0:
                y += a * basis
            else:
                y[m:] += a * basis[:-m]
    if model.a_sat is not None:
        y = soft_limit(y, model.a_sat)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("virtual PA produced non-finite output")
    return sig.with_samples(y) if isinstance(sig, IqSignal) else y


# Pinned coefficient sets. Rows are memory taps 0..4, columns orders 1, 3, 5, 7.
# Linear memory taps stay small so the small-signal output tracks a_{0,1} x.
# Lower supply voltage means an earlier limiter, stronger AM/AM-AM/PM terms
# and, at 4.0 V, nonlinear memory reaching the fourth tap.
_ORDERS = (1, 3, 5, 7)
_LINEAR_TAPS = {
    Freq.F2593: (1.0 + 0.0j, 0.012 - 0.006j, -0.004 + 0.002j, 0.0016 + 0.0j, -0.0006 + 0.0004j),
    Freq.F2643: (1.0 + 0.0j, -0.010 + 0.010j, 0.006 - 0.003j, -0.0024 + 0.0012j, 0.001 + 0.0j),
}


@dataclass(frozen=True)
class _VoltageShape:
    gain: complex
    a3: complex
    a5: complex
    a7: complex
    mem3: tuple  # third-order memory taps 1..4, relative to a3
    a_sat: float
    mem5_tap4: complex = 0.0  # fifth-order term at tap 4, relative to a5


_SHAPES = {
    Voltage.V4_0: _VoltageShape(0.92 * np.exp(0.35j), -0.055 - 0.045j, 0.012 + 0.006j, -0.0010 - 0.0005j,
                                (0.25 + 0.20j, -0.10 - 0.05j, 0.04, 0.3 * np.exp(0.8j)), 1.9, 0.3 * np.exp(-1j)),
    Voltage.V4_2: _VoltageShape(0.96 * np.exp(0.30j), -0.040 - 0.032j, 0.008 + 0.004j, -0.0006 - 0.0003j,
                                (0.25 + 0.20j, -0.10 - 0.05j, 0.04, -0.01), 2.6),
    Voltage.V4_6: _VoltageShape(1.00 * np.exp(0.25j), -0.030 - 0.024j, 0.005 + 0.003j, -0.0004 - 0.0002j,
                                (0.25 + 0.20j, -0.10 - 0.05j, 0.04, -0.01), 3.0),
}


def _preset_coeffs(voltage: Voltage, freq: Freq) -> tuple[np.ndarray, float]:
    s = _SHAPES[voltage]
    c = np.zeros((5, len(_ORDERS)), dtype=np.complex128)
    c[:, 0] = np.asarray(_LINEAR_TAPS[freq])
    c[0, 1:] = (s.a3, s.a5, s.a7)
    c[1:, 1] = s.a3 * np.asarray(s.mem3)
    c[4, 2] = s.a5 * s.mem5_tap4
    return s.gain * c, s.a_sat


def pa_preset(cond: PaCondition) -> PaModel:
    """Pinned virtual-PA model for ``cond``, drive scale folded into the coefficients."""
    coeffs, a_sat = _preset_coeffs(cond.voltage, cond.freq)
    model = PaModel(4, _ORDERS, coeffs, a_sat)
    if cond.drive_scale != 1.0:
        model = model.scaled_input(cond.drive_scale)
    return model


def mp_oracle_preset() -> PaModel:
    """The V4_0 preset without limiter, cut to depth 3 and orders {1, 3, 5}."""
    return pa_preset(PaCondition(Voltage.V4_0)).without_saturation().truncated(3, (1, 3, 5))


TRAIN_CONDITIONS = (PaCondition(Voltage.V4_0), PaCondition(Voltage.V4_2), PaCondition(Voltage.V4_6))
