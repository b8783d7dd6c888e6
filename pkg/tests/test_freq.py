import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from bandreg.freq import (BandSpec, FreqScalarField, FreqTensorField, FreqVectorField, apply_K,
                          apply_L, band_to_spatial, correlate, divergence, inner, jacobian,
                          make_operator, matvec_convolve, pad_size, random_field, spatial_to_band,
                          tensor_product, truncated_convolve)

SPEC = BandSpec(2, 8, 32)
seeds = st.integers(0, 2 ** 32 - 1)


def dc_field(spec, value, rank=0):
    c = np.zeros((spec.dim,) * rank + spec.shape, complex)
    c[(Ellipsis,) + (spec.center,) * spec.dim] = value
    return {0: FreqScalarField, 1: FreqVectorField, 2: FreqTensorField}[rank](spec, c)


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


class TestBandSpec:
    def test_grid_broadcast(self):
        assert BandSpec(3, 4, 10).grid == (10, 10, 10)

    @pytest.mark.parametrize("kw", [dict(dim=1, band=4, grid=8), dict(dim=2, band=5, grid=8),
                                    dict(dim=2, band=16, grid=8), dict(dim=2, band=0, grid=8)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            BandSpec(**kw)

    def test_centered_frequencies(self):
        assert list(BandSpec(2, 8, 16).freqs()) == [-4, -3, -2, -1, 0, 1, 2, 3]


class TestBridges:
    def test_constant_image(self):
        spec = BandSpec(2, 8, 16)
        f = spatial_to_band(np.full((16, 16), 7.0), spec).coeffs.copy()
        assert f[4, 4] == pytest.approx(7.0, abs=1e-14)
        f[4, 4] = 0
        assert np.abs(f).max() < 1e-14

    def test_single_harmonic(self):
        spec = BandSpec(2, 8, 16)
        x = np.arange(16)
        img = np.cos(2 * np.pi * x / 16)[:, None] * np.ones(16)
        f = spatial_to_band(img, spec).coeffs.copy()
        assert f[5, 4] == pytest.approx(0.5, abs=1e-14)
        assert f[3, 4] == pytest.approx(0.5, abs=1e-14)
        f[5, 4] = f[3, 4] = 0
        assert np.abs(f).max() < 1e-14

    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_on_band(self, seed):
        v = random_field(SPEC, np.random.default_rng(seed))
        back = spatial_to_band(band_to_spatial(v), SPEC, rank=1)
        assert rel(back.coeffs, v.coeffs) < 1e-12

    def test_zero_and_dc(self):
        assert np.all(band_to_spatial(FreqScalarField.zeros(SPEC)) == 0)
        np.testing.assert_allclose(band_to_spatial(dc_field(SPEC, 2.5)), 2.5, atol=1e-14)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            spatial_to_band(np.zeros((16, 16)), SPEC)

    def test_grid_smaller_than_band(self):
        with pytest.raises(ValueError):
            band_to_spatial(random_field(SPEC, np.random.default_rng(0)), grid=4)

    def test_real_input_is_hermitian(self):
        img = np.random.default_rng(1).standard_normal((32, 32))
        assert spatial_to_band(img, SPEC).is_hermitian()

    def test_matches_explicit_dft(self):
        img = np.random.default_rng(2).standard_normal((32, 32))
        assert rel(spatial_to_band(img, SPEC).coeffs, oracles.analyze(img, 8, 2)) < 1e-12


class TestOperatorsAgainstOracles:
    sp = oracles.Spatial(8, (32, 32))

    def test_convolution_identity_and_zero(self):
        a = random_field(SPEC, np.random.default_rng(0), rank=0)
        assert rel(truncated_convolve(a, dc_field(SPEC, 1.0)).coeffs, a.coeffs) < 1e-13
        assert np.abs(truncated_convolve(FreqScalarField.zeros(SPEC), a).coeffs).max() == 0

    @pytest.mark.parametrize("seed", range(3))
    def test_convolution(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_field(SPEC, rng, rank=0), random_field(SPEC, rng, rank=0)
        got = truncated_convolve(a, b).coeffs
        assert rel(got, oracles.conv_coeffs(a.coeffs, b.coeffs)) < 1e-10
        spatial = self.sp.band_of(self.sp.field(a.coeffs) * self.sp.field(b.coeffs))
        assert rel(got, spatial) < 1e-10

    def test_pad_size_is_alias_free(self):
        # products reach |xi| <= band - 2; aliases land at xi - P, outside the band
        for band in (2, 4, 8, 16):
            P = pad_size(BandSpec(2, band, 4 * band))[0]
            assert P % 2 == 0 and (band - 2) - P < -band // 2

    def test_jacobian_multiplier(self):
        spec = BandSpec(2, 8, 16)
        c = np.zeros((2,) + spec.shape, complex)
        c[0, 5, 4] = c[0, 3, 4] = 0.5
        J = jacobian(FreqVectorField(spec, c)).coeffs
        assert J[0, 0, 5, 4] == pytest.approx(0.5j * np.sin(2 * np.pi / 16))
        assert np.abs(J[0, 1]).max() == 0

    @pytest.mark.parametrize("seed", range(3))
    def test_jacobian(self, seed):
        v = random_field(SPEC, np.random.default_rng(seed))
        want = self.sp.jacobian(self.sp.field(v.coeffs))
        assert rel(band_to_spatial(jacobian(v)), want.real) < 1e-10

    @pytest.mark.parametrize("seed", range(3))
    def test_correlate(self, seed):
        rng = np.random.default_rng(seed)
        v, m = random_field(SPEC, rng), random_field(SPEC, rng)
        want = self.sp.correlate(self.sp.jacobian(self.sp.field(v.coeffs)), self.sp.field(m.coeffs))
        assert rel(band_to_spatial(correlate(jacobian(v), m)), self.sp.truncate(want).real) < 1e-8

    @pytest.mark.parametrize("seed", range(3))
    def test_tensor_product_and_divergence(self, seed):
        rng = np.random.default_rng(seed)
        m, v = random_field(SPEC, rng), random_field(SPEC, rng)
        P = tensor_product(m, v)
        want = self.sp.tensor_product(self.sp.field(m.coeffs), self.sp.field(v.coeffs))
        assert rel(P.coeffs, self.sp.band_of(want)) < 1e-10
        div = self.sp.divergence(self.sp.field(P.coeffs))
        assert rel(divergence(P).coeffs, self.sp.band_of(div)) < 1e-10

    def test_tensor_convention(self):
        v = random_field(SPEC, np.random.default_rng(3))
        P = tensor_product(dc_field(SPEC, 1.0, rank=1), v).coeffs
        for j in range(2):
            assert rel(P[j], v.coeffs) < 1e-12

    def test_matvec(self):
        rng = np.random.default_rng(4)
        A, v = random_field(SPEC, rng, rank=2), random_field(SPEC, rng)
        want = np.einsum("jk...,k...->j...", self.sp.field(A.coeffs), self.sp.field(v.coeffs))
        assert rel(matvec_convolve(A, v).coeffs, self.sp.band_of(want)) < 1e-10

    def test_derivatives_of_constants_vanish(self):
        assert np.abs(jacobian(dc_field(SPEC, 1.0, rank=1)).coeffs).max() == 0
        assert np.abs(divergence(dc_field(SPEC, 1.0, rank=2)).coeffs).max() == 0

    def test_spec_mismatch(self):
        a = random_field(SPEC, np.random.default_rng(0), rank=0)
        b = random_field(BandSpec(2, 8, 16), np.random.default_rng(0), rank=0)
        with pytest.raises(ValueError):
            truncated_convolve(a, b)


class TestProperties:
    @given(seeds, st.floats(-3, 3))
    @settings(max_examples=15, deadline=None)
    def test_linearity(self, seed, s):
        rng = np.random.default_rng(seed)
        a, b, c = (random_field(SPEC, rng) for _ in range(3))
        A = random_field(SPEC, rng, rank=2)
        checks = [
            (lambda x: jacobian(x), a, b),
            (lambda x: divergence(jacobian(x)), a, b),
            (lambda x: tensor_product(x, c), a, b),
            (lambda x: tensor_product(c, x), a, b),
            (lambda x: correlate(A, x), a, b),
        ]
        for op, x, y in checks:
            lhs = op(x + y * s).coeffs
            rhs = (op(x) + op(y) * s).coeffs
            assert np.abs(lhs - rhs).max() <= 1e-10 * max(np.abs(rhs).max(), 1.0)
        lhs = correlate(jacobian(a + b), c).coeffs
        rhs = (correlate(jacobian(a), c) + correlate(jacobian(b), c)).coeffs
        assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()

    @given(seeds)
    @settings(max_examples=15, deadline=None)
    def test_hermitian_preserved(self, seed):
        rng = np.random.default_rng(seed)
        v, m = random_field(SPEC, rng), random_field(SPEC, rng)
        for out in (jacobian(v), tensor_product(m, v), divergence(tensor_product(m, v)),
                    correlate(jacobian(v), m), truncated_convolve(v.component(0), m.component(1))):
            assert out.is_hermitian(atol=1e-12 * max(np.abs(out.coeffs).max(), 1))

    def test_inner_is_real_pairing(self):
        rng = np.random.default_rng(0)
        a, b = random_field(SPEC, rng), random_field(SPEC, rng)
        assert inner(a, b) == pytest.approx(np.real(np.vdot(a.coeffs, b.coeffs)))
        assert inner(a, a) == pytest.approx(a.norm() ** 2)


class TestSmoothingOperator:
    def test_closed_form_spot_value(self):
        op = make_operator(3.0, 6, BandSpec(2, 2, 2))
        # index 0 on each axis is xi = -1, i.e. normalized frequency 1/2
        assert op.lcoeffs[0, 1] == 13 ** 6 == 4_826_809
        assert op.lcoeffs[1, 1] == 1.0 and op.kcoeffs[1, 1] == 1.0

    def test_inverse_pair(self):
        op = make_operator(3.0, 6, SPEC)
        assert np.abs(op.lcoeffs * op.kcoeffs - 1).max() <= 1e-15
        assert op.lcoeffs.min() >= 1.0
        v = random_field(SPEC, np.random.default_rng(0))
        assert rel(apply_K(op, apply_L(op, v)).coeffs, v.coeffs) < 1e-15

    def test_matches_stencil_symbol(self):
        op = make_operator(3.0, 6, SPEC)
        assert rel(op.lcoeffs, oracles.Spatial(8, (32, 32)).L_symbol(3.0, 6)) < 1e-10

    @pytest.mark.parametrize("alpha,power", [(0.0, 6), (-1.0, 2), (3.0, 0), (3.0, 1.5)])
    def test_rejects_bad_parameters(self, alpha, power):
        with pytest.raises(ValueError):
            make_operator(alpha, power, SPEC)

    def test_spec_mismatch(self):
        op = make_operator(3.0, 6, SPEC)
        with pytest.raises(ValueError):
            apply_L(op, random_field(BandSpec(2, 8, 16), np.random.default_rng(0)))


def test_three_dimensional_fields():
    spec = BandSpec(3, 4, 8)
    rng = np.random.default_rng(0)
    v, m = random_field(spec, rng), random_field(spec, rng)
    sp = oracles.Spatial(4, (8, 8, 8))
    want = sp.band_of(sp.tensor_product(sp.field(m.coeffs), sp.field(v.coeffs)))
    assert rel(tensor_product(m, v).coeffs, want) < 1e-10
    assert rel(band_to_spatial(jacobian(v)), sp.jacobian(sp.field(v.coeffs)).real) < 1e-10
