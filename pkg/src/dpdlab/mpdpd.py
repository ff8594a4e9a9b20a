"""Memory-polynomial DPD baseline identified by indirect learning."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError
from .iqsig import IqSignal

RIDGE = 1e-8
MAX_CONDITION = 1e12


def odd_orders(order: int) -> tuple[int, ...]:
    if order < 1 or order % 2 == 0:
        raise ValueError("polynomial order must be odd and positive")
    return tuple(range(1, order + 1, 2))


@dataclass(frozen=True, eq=False)
class MpCoeffs:
    """Coefficients ``c[m, j]`` for delay ``m`` and odd order ``orders[j]``."""

    memory_depth: int
    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        if c.shape != (self.memory_depth + 1, len(odd_orders(self.order))):
            raise ValueError(f"coeffs shape {c.shape} does not match (M={self.memory_depth}, P={self.order})")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def orders(self) -> tuple[int, ...]:
        return odd_orders(self.order)

    @classmethod
    def identity(cls, memory_depth: int = 3, order: int = 5) -> MpCoeffs:
        c = np.zeros((memory_depth + 1, len(odd_orders(order))), dtype=np.complex128)
        c[0, 0] = 1.0
        return cls(memory_depth, order, c)

    def to_dict(self) -> dict:
        return {
            "memory_depth": self.memory_depth,
            "order": self.order,
            "coeffs_re": self.coeffs.real.tolist(),
            "coeffs_im": self.coeffs.imag.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> MpCoeffs:
        c = np.asarray(d["coeffs_re"], dtype=float) + 1j * np.asarray(d["coeffs_im"], dtype=float)
        return cls(d["memory_depth"], d["order"], c)

    @classmethod
    def from_json(cls, text: str) -> MpCoeffs:
        return cls.from_dict(json.loads(text))


def mp_basis(x: np.ndarray, memory_depth: int, order: int) -> np.ndarray:
    """Regression matrix with column ``m * len(orders) + j`` = ``x(n-m)|x(n-m)|^(k_j-1)``."""
    x = np.asarray(x, dtype=np.complex128)
    orders = odd_orders(order)
    env = np.abs(x)
    terms = np.stack([x * env ** (k - 1) for k in orders], axis=-1)
    out = np.zeros((x.size, memory_depth + 1, len(orders)), dtype=np.complex128)
    for m in range(memory_depth + 1):
        out[m:, m] = terms[: x.size - m]
    return out.reshape(x.size, -1)


def mp_apply(c: MpCoeffs, sig):
    """Apply the memory polynomial to an ``IqSignal`` or complex array (causal, zero history)."""
    x = sig.samples if isinstance(sig, IqSignal) else np.asarray(sig)
    u = mp_basis(x, c.memory_depth, c.order) @ c.coeffs.ravel()
    return sig.with_samples(u) if isinstance(sig, IqSignal) else u


def mp_fit(inputs: np.ndarray, outputs: np.ndarray, memory_depth: int, order: int,
           ridge: float = RIDGE) -> tuple[MpCoeffs, float]:
    """Ridge least squares ``min_c ||basis(inputs) c - outputs||``.

    The ridge weight is ``ridge`` times the mean diagonal of the Gram matrix.

    Returns:
        The coefficients and the relative residual energy of the fit.

    Raises:
        ConditioningError: if the basis is numerically rank deficient.
    """
    a = mp_basis(inputs, memory_depth, order)
    b = np.asarray(outputs, dtype=np.complex128)
    s = np.linalg.svd(a, compute_uv=False)
    cond = np.inf if s[-1] == 0 else s[0] / s[-1]
    if not cond < MAX_CONDITION:
        raise ConditioningError(f"MP basis is rank deficient (condition number {cond:.3g})", cond)
    gram = a.conj().T @ a
    lam = ridge * np.trace(gram).real / gram.shape[0]
    coef = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), a.conj().T @ b)
    resid = np.sum(np.abs(a @ coef - b) ** 2) / np.sum(np.abs(b) ** 2)
    return MpCoeffs(memory_depth, order, coef.reshape(memory_depth + 1, -1)), float(resid)


def mp_fit_postinverse(pa_in: IqSignal, pa_out: IqSignal, memory_depth: int = 3, order: int = 5,
                       g0: complex | None = None) -> MpCoeffs:
    """Identify a post-inverse of the PA and return it for use as the pre-distorter.

    ``pa_out`` is divided by the small-signal gain ``g0`` (estimated by least
    squares when omitted) and the memory polynomial mapping it back to
    ``pa_in`` is fitted.
    """
    x = pa_in.samples if isinstance(pa_in, IqSignal) else np.asarray(pa_in)
    y = pa_out.samples if isinstance(pa_out, IqSignal) else np.asarray(pa_out)
    if x.shape != y.shape:
        raise ValueError("pa_in and pa_out lengths differ")
    if g0 is None:
        g0 = np.vdot(x, y) / np.vdot(x, x)
    coeffs, _ = mp_fit(y / g0, x, memory_depth, order)
    return coeffs
