import numpy as np
import pytest

from bandreg.data import synth_pairs
from bandreg.freq import FreqVectorField, apply_L, inner, random_field
from bandreg.registration import (HermitianCoords, RegConfig, energy, gradient_fd, register,
                                  regularizer, ssd)

CFG = RegConfig(band=8, grid=32)


@pytest.fixture(scope="module")
def pair():
    p = synth_pairs(1, seed=3, grid=32)[0]
    return p.source, p.target


def small_field(seed, scale=0.05):
    return random_field(CFG.spec, np.random.default_rng(seed), scale=scale, decay=0.3)


class TestConfig:
    def test_defaults(self):
        cfg = RegConfig()
        assert (cfg.alpha, cfg.power, cfg.steps, cfg.band) == (3.0, 6, 10, 16)

    @pytest.mark.parametrize("kw", [dict(gamma=0), dict(alpha=-1), dict(steps=0), dict(tol=1.0),
                                    dict(fd_eps=0), dict(max_iters=0), dict(band=7)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            RegConfig(**kw)

    def test_to_dict_roundtrip(self):
        assert RegConfig(**CFG.to_dict()) == CFG


class TestEnergy:
    def test_zero_at_identity(self, pair):
        S, _ = pair
        assert energy(FreqVectorField.zeros(CFG.spec), S, S, CFG) == 0.0

    def test_pure_matching_at_zero_velocity(self, pair):
        S, T = pair
        E = energy(FreqVectorField.zeros(CFG.spec), S, T, CFG)
        assert E == pytest.approx(0.5 * CFG.gamma * np.mean((S - T) ** 2), rel=1e-14)

    def test_regularizer_quadratic(self):
        op = CFG.operator()
        v = small_field(0)
        assert regularizer(v * 3.0, op) == pytest.approx(9.0 * regularizer(v, op), rel=1e-14)
        assert regularizer(v, op) == pytest.approx(0.5 * inner(apply_L(op, v), v), rel=1e-14)

    def test_batched(self, pair):
        S, T = pair
        vs = [small_field(i) for i in range(3)]
        batch = FreqVectorField(CFG.spec, np.stack([v.coeffs for v in vs]))
        Eb = energy(batch, S, T, CFG)
        assert np.allclose(Eb, [energy(v, S, T, CFG) for v in vs], rtol=1e-13)

    def test_shape_check(self, pair):
        S, _ = pair
        with pytest.raises(ValueError):
            energy(FreqVectorField.zeros(CFG.spec), S, S[:16], CFG)

    def test_ssd_is_voxel_mean(self):
        a, b = np.zeros((4, 4)), np.ones((4, 4))
        assert ssd(a, b) == 1.0


class TestGradient:
    def test_coords_roundtrip(self):
        coords = HermitianCoords(CFG.spec)
        # 7x7 paired block per component: DC plus 24 conjugate pairs of two reals each
        assert coords.size == 2 * 49
        v = small_field(1)
        assert np.abs(coords.to_field(coords.to_params(v)).coeffs - v.coeffs).max() < 1e-15

    def test_zero_at_minimum(self, pair):
        S, _ = pair
        G = gradient_fd(FreqVectorField.zeros(CFG.spec), S, S, CFG)
        # exact minimum, but bilinear kinks at grid points leave an O(fd_eps) residue
        assert G.norm() < 1e3 * CFG.fd_eps

    def test_regularizer_gradient_is_Lv(self, pair):
        S, _ = pair
        # with gamma tiny the matching term is negligible next to the regularizer
        cfg = RegConfig(band=8, grid=32, gamma=1e-12, fd_eps=1e-4)
        v = small_field(2, scale=0.01)
        G = gradient_fd(v, S, S, cfg)
        Lv = apply_L(cfg.operator(), v)
        assert np.abs(G.coeffs - Lv.coeffs).max() <= 1e-6 * np.abs(Lv.coeffs).max()
        assert G.is_hermitian()

    @pytest.mark.parametrize("seed", range(2))
    def test_secant(self, pair, seed):
        S, T = pair
        v = small_field(seed + 10)
        h = small_field(seed + 20)
        G = gradient_fd(v, S, T, CFG)
        eps = 1e-5
        fd = (energy(v + h * eps, S, T, CFG) - energy(v - h * eps, S, T, CFG)) / (2 * eps)
        assert inner(G, h) == pytest.approx(fd, rel=1e-4)


class TestRegister:
    def test_identical_pair(self, pair):
        S, _ = pair
        res = register(S, S, CFG)
        assert res.iterations <= 2 and res.converged
        assert res.final_ssd == 0.0 and np.all(res.v_opt.coeffs == 0)

    def test_bull_eye_pair(self, pair):
        S, T = pair
        res = register(S, T, RegConfig(band=8, grid=32, max_iters=60))
        assert res.final_ssd <= 0.2 * res.initial_ssd
        assert res.min_detjac > 0
        assert all(b <= a for a, b in zip(res.energy_trace, res.energy_trace[1:]))
        assert res.v_opt.is_hermitian()
        d = res.diagnostics()
        assert d["iterations"] == res.iterations and d["final_energy"] == res.energy_trace[-1]

    def test_deterministic(self, pair):
        S, T = pair
        cfg = RegConfig(band=8, grid=32, max_iters=3)
        a, b = register(S, T, cfg), register(S, T, cfg)
        assert np.array_equal(a.v_opt.coeffs, b.v_opt.coeffs)
