"""Desk-scale benchmark corpus: seeded bull-eye pairs labeled by the optimizer.

The corpus is cached on disk keyed by a hash of everything that shapes it, so
the acceptance suite and the experiment scripts share one labeling run.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import Dataset, make_labels, synth_pairs
from .fileio import load_dataset, save_dataset
from .metrics import config_hash
from .registration import RegConfig

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("BANDREG_CACHE", Path.home() / ".cache" / "bandreg"))


@dataclass(frozen=True)
class CorpusConfig:
    n_pairs: int = 270
    n_test: int = 50
    n_val: int = 10
    seed: int = 2024
    split_seed: int = 0
    blur: float = 1.0
    reg: RegConfig = field(default_factory=lambda: RegConfig(band=8, grid=32))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reg"] = self.reg.to_dict()
        return d

    @property
    def key(self) -> str:
        return config_hash(self.to_dict())


def build(cfg: CorpusConfig, workers: int = 1) -> Dataset:
    pairs = synth_pairs(cfg.n_pairs, cfg.seed, grid=cfg.reg.grid, blur=cfg.blur)
    ds = make_labels(pairs, cfg.reg, workers=workers, seed=cfg.split_seed,
                     n_test=cfg.n_test, n_val=cfg.n_val)
    ds.provenance["corpus"] = cfg.to_dict()
    return ds


def cached(cfg: CorpusConfig, cache: Path | str | None = None, workers: int = 1) -> Dataset:
    """Load the corpus for ``cfg`` from ``cache`` or build and store it."""
    root = Path(cache or DEFAULT_CACHE) / f"corpus-{cfg.key}"
    if (root / "manifest.json").exists():
        log.info("loading cached corpus %s", root)
        return load_dataset(root)
    log.info("building corpus %s (%d pairs)", root, cfg.n_pairs)
    ds = build(cfg, workers)
    save_dataset(root, ds)
    (root / "corpus.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return ds
