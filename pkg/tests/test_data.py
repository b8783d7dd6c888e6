import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bandreg.data import (INNER, RING, BullEyeParams, Dataset, draw_params, gen_bulleye,
                          make_labels, make_pairs, render, split_indices, synth_pairs)
from bandreg.registration import RegConfig


class TestSynthesis:
    def test_draw_statistics(self):
        # rejection trims the tails, so only a loose check on the location
        rng = np.random.default_rng(0)
        ps = [draw_params(rng) for _ in range(4000)]
        a_in = np.array([p.a_in for p in ps])
        a_out = np.array([p.a_out for p in ps])
        assert 3.5 < a_in.mean() < 5.0 and 1.2 < a_in.std() < 2.2
        assert 12.0 < a_out.mean() < 14.0 and 3.0 < a_out.std() < 4.5

    def test_raw_draws_use_the_stated_gaussians(self, monkeypatch):
        calls = []
        real = np.random.Generator.normal

        class Spy:
            def __init__(self, rng):
                self.rng = rng

            def normal(self, loc, scale, size=None):
                calls.append((loc, scale))
                return real(self.rng, loc, scale, size)

        draw_params(Spy(np.random.default_rng(1)))
        assert calls[:2] == [(4.0, 2.0), (13.0, 4.0)]

    def test_nested(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = draw_params(rng, (32, 32))
            assert 0.5 <= p.a_in < p.a_out <= 15 and 0.5 <= p.b_in < p.b_out <= 15

    def test_rejects_unnested(self):
        with pytest.raises(ValueError):
            BullEyeParams(5, 2, 4, 6)

    def test_intensities_and_masks(self):
        img, mask = render(BullEyeParams(4, 6, 12, 10), blur=0)
        assert set(np.unique(img)) == {0.0, 0.5, 1.0}
        assert np.all((img == 1.0) == (mask == RING))
        assert np.all((img == 0.5) == (mask == INNER))
        assert mask[50, 50] == INNER

    def test_circles_have_fourfold_symmetry(self):
        img, _ = render(BullEyeParams(5, 5, 14, 14), blur=1.0)
        x, y = np.meshgrid(np.arange(100), np.arange(100), indexing="ij")
        # quarter turn about the pixel (50, 50) on the periodic grid
        rotated = img[y, (100 - x) % 100]
        np.testing.assert_allclose(rotated, img, atol=1e-12)

    def test_reproducible(self):
        a = gen_bulleye(3, 11, grid=32)
        b = gen_bulleye(3, 11, grid=32)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]
        assert not np.array_equal(a[0], gen_bulleye(3, 12, grid=32)[0])

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=10, deadline=None)
    def test_invariants(self, seed):
        imgs, masks, _ = gen_bulleye(2, seed, grid=32)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0
        assert set(np.unique(masks)) <= {0, INNER, RING}
        assert not np.any((masks == INNER) & (masks == RING))

    def test_needs_one(self):
        with pytest.raises(ValueError):
            gen_bulleye(0, 0)


class TestPairing:
    def test_disjoint(self):
        imgs, masks, _ = gen_bulleye(9, 0, grid=16)
        pairs = make_pairs(imgs, masks, 1)
        assert len(pairs) == 4
        used = [p.source.tobytes() for p in pairs] + [p.target.tobytes() for p in pairs]
        assert len(set(used)) == 8

    def test_splits(self):
        s = split_indices(20, 3)
        assert (len(s["test"]), len(s["val"]), len(s["train"])) == (4, 2, 14)
        assert sorted(sum(s.values(), [])) == list(range(20))
        assert s == split_indices(20, 3) and s != split_indices(20, 4)
        with pytest.raises(ValueError):
            split_indices(5, 0, n_test=4, n_val=2)

    def test_dataset_checks_cover(self):
        with pytest.raises(ValueError):
            Dataset([None, None], {"train": [0], "test": [0]})


class TestLabels:
    def test_identical_pair_and_provenance(self):
        imgs, masks, _ = gen_bulleye(1, 5, grid=32)
        pairs = make_pairs(np.stack([imgs[0]] * 2), np.stack([masks[0]] * 2), 0)
        cfg = RegConfig(band=8, grid=32, max_iters=5)
        ds = make_labels(pairs, cfg, n_test=0, n_val=0)
        assert np.abs(ds.examples[0].v_opt.coeffs).max() == 0
        assert ds.provenance["reg_config"] == cfg.to_dict()
        assert ds.provenance["accepted"] == 1 and ds.split["train"] == [0]

    def test_rejected_pairs_keep_their_slot(self):
        pairs = synth_pairs(3, 0, grid=32)
        cfg = RegConfig(band=8, grid=32, max_iters=2)
        ds = make_labels(pairs, cfg, seed=1, n_test=1, n_val=1)
        assert len(ds.examples) + len(ds.provenance["rejected"]) == 3
        names = {pid: k for k, ids in ds.provenance["pair_split"].items() for pid in ids}
        for k, idx in ds.split.items():
            assert all(names[ds.examples[i].pair_id] == k for i in idx)
