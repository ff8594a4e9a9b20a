import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpdlab import spectra
from dpdlab.errors import ConditioningError
from dpdlab.iqsig import WaveformConfig, generate_frame, ls_gain, small_signal_gain
from dpdlab.mpdpd import (
    MpCoeffs,
    mp_apply,
    mp_basis,
    mp_fit,
    mp_fit_postinverse,
    odd_orders,
)
from dpdlab.vpa import mp_oracle_preset, pa_apply


@pytest.fixture(scope="module")
def frame7():
    return generate_frame(WaveformConfig(), 7)


def _random_coeffs(rng, m=3, p=5):
    c = rng.standard_normal((m + 1, len(odd_orders(p)))) + 1j * rng.standard_normal((m + 1, len(odd_orders(p))))
    return MpCoeffs(m, p, c)


def _naive_mp(c, x):
    u = np.zeros(x.size, dtype=complex)
    for n in range(x.size):
        for m in range(c.memory_depth + 1):
            if n - m < 0:
                continue
            v = x[n - m]
            for j, k in enumerate(c.orders):
                u[n] += c.coeffs[m, j] * v * abs(v) ** (k - 1)
    return u


class TestMpCoeffs:
    def test_orders(self):
        assert odd_orders(5) == (1, 3, 5)
        with pytest.raises(ValueError):
            odd_orders(4)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            MpCoeffs(3, 5, np.zeros((3, 3)))
        with pytest.raises(ValueError):
            MpCoeffs(0, 1, np.array([[np.inf]]))

    def test_json(self):
        c = _random_coeffs(np.random.default_rng(0))
        back = MpCoeffs.from_json(c.to_json())
        assert np.array_equal(back.coeffs, c.coeffs)
        assert set(json.loads(c.to_json())) == {"memory_depth", "order", "coeffs_re", "coeffs_im"}


class TestMpApply:
    def test_identity(self, frame7):
        y = mp_apply(MpCoeffs.identity(), frame7)
        assert np.array_equal(y.samples, frame7.samples)

    def test_zero_signal(self):
        c = _random_coeffs(np.random.default_rng(1))
        assert not np.any(mp_apply(c, np.zeros(16, dtype=complex)))

    def test_naive_oracle(self):
        rng = np.random.default_rng(2)
        c = _random_coeffs(rng)
        x = rng.standard_normal(300) + 1j * rng.standard_normal(300)
        ref = _naive_mp(c, x)
        out = mp_apply(c, x)
        assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) < 1e-9

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_linear_in_coefficients(self, seed, a, b):
        rng = np.random.default_rng(seed)
        c1, c2 = _random_coeffs(rng), _random_coeffs(rng)
        x = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        lhs = mp_apply(MpCoeffs(3, 5, a * c1.coeffs + b * c2.coeffs), x)
        rhs = a * mp_apply(c1, x) + b * mp_apply(c2, x)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_basis_layout(self):
        x = np.array([1.0, 2.0j, -3.0])
        a = mp_basis(x, 1, 3)
        # column m * len(orders) + j
        np.testing.assert_allclose(a[:, 0], x)
        np.testing.assert_allclose(a[:, 1], x * np.abs(x) ** 2)
        np.testing.assert_allclose(a[:, 2], [0, 1.0, 2.0j])


class TestMpFit:
    def test_pure_gain(self, frame7):
        g0 = 0.9 * np.exp(0.3j)
        c = mp_fit_postinverse(frame7, frame7 * g0, 3, 5, g0=g0)
        expect = np.zeros_like(c.coeffs)
        expect[0, 0] = 1
        np.testing.assert_allclose(c.coeffs, expect, atol=1e-4)  # ridge bias

    def test_rank_deficient(self):
        x = np.ones(100, dtype=complex)  # every column is a multiple of another
        with pytest.raises(ConditioningError) as e:
            mp_fit(x, x, 2, 3)
        assert e.value.condition_number > 1e12

    def test_length_mismatch(self, frame7):
        with pytest.raises(ValueError):
            mp_fit_postinverse(frame7.samples[:100], frame7.samples[:99])

    def test_mp_oracle_inversion(self, frame7):
        pa = mp_oracle_preset()
        y = pa_apply(pa, frame7)
        g0 = small_signal_gain(lambda u: pa_apply(pa, u), frame7.samples)
        c = mp_fit_postinverse(frame7, y, 3, 5, g0=g0)
        out = pa_apply(pa, mp_apply(c, frame7))
        assert spectra.mse_dbc(frame7 * g0, out) <= -40.0

    def test_nested_residual_non_increasing(self, frame7):
        pa = mp_oracle_preset()
        x = frame7.samples[:8192]
        y = pa_apply(pa, x)
        g0 = ls_gain(x, y)
        res = []
        for m, p in [(0, 1), (1, 3), (2, 3), (3, 5), (4, 7)]:
            _, r = mp_fit(y / g0, x, m, p)
            res.append(r)
        assert all(b <= a * (1 + 1e-9) for a, b in itertools.pairwise(res))
