"""Synthetic bull-eye corpus, pairing, label generation and dataset containers."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .freq import BandSpec, FreqScalarField, FreqVectorField, spatial_to_band
from .registration import EnergyDiverged, RegConfig, register

log = logging.getLogger(__name__)

INNER, RING = 1, 2
LABEL_NAMES = {INNER: "inner", RING: "ring"}


@dataclass(frozen=True)
class BullEyeParams:
    """Semi-axes in voxels; the center sits at the grid midpoint."""

    a_in: float
    b_in: float
    a_out: float
    b_out: float
    grid: tuple = (100, 100)

    def __post_init__(self):
        if not (0 < self.a_in < self.a_out and 0 < self.b_in < self.b_out):
            raise ValueError(f"ellipses are not nested: {self}")

    @property
    def center(self) -> tuple:
        return tuple(g / 2 for g in self.grid)


def draw_params(rng: np.random.Generator, grid: Sequence[int] = (100, 100)) -> BullEyeParams:
    """Semi-axes in voxels: inner ~ N(4, 2^2), outer ~ N(13, 4^2), drawn independently.

    Draws are rejected until ``0.5 <= inner < outer`` and the outer ellipse
    stays one voxel clear of the image border (only binding on small grids).
    """
    grid = tuple(int(g) for g in grid)
    limit = [0.5 * g - 1 for g in grid]
    while True:
        a_in, b_in = rng.normal(4.0, 2.0, size=2)
        a_out, b_out = rng.normal(13.0, 4.0, size=2)
        if 0.5 <= a_in < a_out <= limit[0] and 0.5 <= b_in < b_out <= limit[1]:
            return BullEyeParams(a_in, b_in, a_out, b_out, grid)


def render(params: BullEyeParams, blur: float = 1.0):
    """Image (ring 1.0, inner 0.5, background 0) and its label mask."""
    x, y = np.meshgrid(*[np.arange(g, dtype=float) for g in params.grid], indexing="ij")
    cx, cy = params.center
    inside_out = ((x - cx) / params.a_out) ** 2 + ((y - cy) / params.b_out) ** 2 <= 1.0
    inside_in = ((x - cx) / params.a_in) ** 2 + ((y - cy) / params.b_in) ** 2 <= 1.0
    mask = np.zeros(params.grid, dtype=np.int64)
    mask[inside_out] = RING
    mask[inside_in] = INNER
    img = np.where(mask == RING, 1.0, np.where(mask == INNER, 0.5, 0.0))
    if blur > 0:
        img = gaussian_filter(img, blur, mode="wrap")
    return np.clip(img, 0.0, 1.0), mask


def gen_bulleye(n: int, seed: int, grid: int | Sequence[int] = 100, blur: float = 1.0):
    """Return ``(images, masks, params)`` for ``n`` seeded bull-eye phantoms."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grid = (int(grid),) * 2 if np.isscalar(grid) else tuple(int(g) for g in grid)
    rng = np.random.default_rng(seed)
    params = [draw_params(rng, grid) for _ in range(n)]
    rendered = [render(p, blur) for p in params]
    images = np.stack([r[0] for r in rendered])
    masks = np.stack([r[1] for r in rendered])
    return images, masks, params


@dataclass
class Pair:
    source: np.ndarray
    target: np.ndarray
    source_mask: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    pair_id: int = 0


def make_pairs(images, masks, seed: int) -> list:
    """Random disjoint pairing of a generated pool (``len(images) // 2`` pairs)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    pairs = []
    for i in range(len(images) // 2):
        s, t = perm[2 * i], perm[2 * i + 1]
        pairs.append(Pair(images[s], images[t], masks[s], masks[t], pair_id=i))
    return pairs


def synth_pairs(n_pairs: int, seed: int, grid=100, blur: float = 1.0) -> list:
    images, masks, _ = gen_bulleye(2 * n_pairs, seed, grid, blur)
    return make_pairs(images, masks, seed + 1)


@dataclass
class TrainingExample:
    s_freq: FreqScalarField
    t_freq: FreqScalarField
    v_opt: FreqVectorField | None = None
    source: np.ndarray | None = None
    target: np.ndarray | None = None
    source_mask: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    pair_id: int = 0

    def __post_init__(self):
        specs = {self.s_freq.spec, self.t_freq.spec}
        if self.v_opt is not None:
            specs.add(self.v_opt.spec)
        if len(specs) != 1:
            raise ValueError(f"example fields do not share one band spec: {specs}")

    @property
    def spec(self) -> BandSpec:
        return self.s_freq.spec


def example_from_images(S, T, spec: BandSpec, **kw) -> TrainingExample:
    return TrainingExample(spatial_to_band(S, spec), spatial_to_band(T, spec), source=S, target=T, **kw)


@dataclass
class Dataset:
    examples: list
    split: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = sorted(i for part in self.split.values() for i in part)
        if idx != list(range(len(self.examples))):
            raise ValueError("dataset splits must be disjoint and cover every example")

    def subset(self, name: str) -> list:
        return [self.examples[i] for i in self.split.get(name, [])]


def split_indices(n: int, seed: int, n_test: int | None = None, n_val: int | None = None) -> dict:
    """Deterministic train/val/test split; defaults to 70/10/20."""
    n_test = int(round(0.2 * n)) if n_test is None else n_test
    n_val = int(round(0.1 * n)) if n_val is None else n_val
    if n_test + n_val > n:
        raise ValueError(f"cannot take {n_test} test + {n_val} val from {n} examples")
    perm = np.random.default_rng(seed).permutation(n)
    return {
        "test": sorted(int(i) for i in perm[:n_test]),
        "val": sorted(int(i) for i in perm[n_test: n_test + n_val]),
        "train": sorted(int(i) for i in perm[n_test + n_val:]),
    }


def _label_one(args):
    pair, cfg = args
    try:
        res = register(pair.source, pair.target, cfg)
    except EnergyDiverged as exc:
        return pair.pair_id, None, {"error": str(exc)}
    return pair.pair_id, res.v_opt.coeffs, res.diagnostics() | {"energy_trace": res.energy_trace}


def label_pairs(pairs: Sequence[Pair], cfg: RegConfig, workers: int = 1) -> list:
    """Register every pair; returns ``(pair, v_opt coeffs or None, diagnostics)`` in input order."""
    jobs = [(p, cfg) for p in pairs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_label_one, jobs))
    else:
        out = [_label_one(j) for j in jobs]
    return [(p, c, diag) for p, (_, c, diag) in zip(pairs, out)]


def make_labels(pairs: Sequence[Pair], cfg: RegConfig, workers: int = 1, seed: int = 0,
                n_test: int | None = None, n_val: int | None = None) -> Dataset:
    """Label pairs with the optimizer; drops diverged or folding registrations.

    The split is drawn over pair positions before labeling, so a rejected pair
    leaves a hole in its own split instead of shifting the others. Rejections
    keep their diagnostics in the provenance.
    """
    spec = cfg.spec
    pair_split = split_indices(len(pairs), seed, n_test, n_val)
    home = {i: name for name, idx in pair_split.items() for i in idx}
    examples, rejected = [], []
    split = {name: [] for name in pair_split}
    for pos, (pair, coeffs, diag) in enumerate(label_pairs(pairs, cfg, workers)):
        if coeffs is None or not diag["min_detjac"] > 0:
            reason = diag.get("error", f"min_detjac={diag.get('min_detjac')}")
            log.warning("pair %d rejected: %s", pair.pair_id, reason)
            rejected.append({"pair_id": pair.pair_id, "reason": reason, "split": home[pos],
                             "diagnostics": diag})
            continue
        split[home[pos]].append(len(examples))
        examples.append(example_from_images(
            pair.source, pair.target, spec,
            v_opt=FreqVectorField(spec, coeffs),
            source_mask=pair.source_mask, target_mask=pair.target_mask,
            diagnostics=diag, pair_id=pair.pair_id,
        ))
    provenance = {
        "reg_config": cfg.to_dict(),
        "seed": seed,
        "n_pairs": len(pairs),
        "accepted": len(examples),
        "pair_split": {k: [pairs[i].pair_id for i in v] for k, v in pair_split.items()},
        "rejected": rejected,
    }
    return Dataset(examples, split, provenance)
