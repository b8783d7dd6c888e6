"""Overlap scores, layer-cost model and timing comparisons."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class DiceReport:
    per_label: dict
    mean: float
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_label": {str(k): v for k, v in self.per_label.items()}, "mean": self.mean,
                "notes": self.notes}


def dice(a: np.ndarray, b: np.ndarray, labels: Sequence[int] | None = None) -> DiceReport:
    """Per-label ``2|A & B| / (|A| + |B|)``; background (0) is ignored unless listed."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if labels is None:
        labels = sorted((set(np.unique(a).tolist()) | set(np.unique(b).tolist())) - {0})
    scores, notes = {}, []
    for lab in labels:
        A, B = a == lab, b == lab
        size = int(A.sum()) + int(B.sum())
        if size == 0:
            notes.append(f"label {lab} absent from both masks")
            continue
        scores[int(lab)] = 2.0 * int(np.sum(A & B)) / size
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return DiceReport(scores, mean, notes)


@dataclass
class CostModel:
    """Multiply-accumulate count ``sum_p b_{p-1} h_p^d b_p n_p`` of a conv stack."""

    layers: list
    dim: int
    total: float = 0.0

    def __post_init__(self):
        self.total = float(sum(bp * h ** self.dim * b * n for bp, b, h, n in self.layers))


def layer_cost(arch, full_dims: Sequence[int], band_dims: Sequence[int]):
    """Cost of ``arch`` evaluated on full-resolution and band-sized outputs.

    ``arch`` is a sequence of ``LayerSpec`` or ``(in_ch, out_ch, kernel)``
    tuples. Output positions are the number of output elements per layer
    (the product of the dims, not squared).
    """
    if any(int(n) <= 0 for n in (*full_dims, *band_dims)):
        raise ValueError("dimensions must be positive")
    if len(full_dims) != len(band_dims):
        raise ValueError("full and band dims must have the same rank")
    dim = len(full_dims)
    triples = [(s.in_ch, s.out_ch, s.kernel) if hasattr(s, "in_ch") else tuple(s) for s in arch]
    n_full = int(np.prod(full_dims))
    n_band = int(np.prod(band_dims))
    full = CostModel([(i, o, k, n_full) for i, o, k in triples], dim)
    band = CostModel([(i, o, k, n_band) for i, o, k in triples], dim)
    return full, band, full.total / band.total


def config_hash(*configs) -> str:
    blob = json.dumps([c if isinstance(c, dict) else c.to_dict() for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


CSV_COLUMNS = ["pair_id", "method", "wall_ms", "final_ssd", "min_detjac"]


def timing_report(pairs, cfg, weights, repeats: int = 1, out: str | Path | None = None) -> dict:
    """Wall-clock ``register`` vs ``predict`` on the same pairs.

    Returns rows plus per-method medians; writes a CSV when ``out`` is given.
    """
    from .dualnet import predict
    from .registration import register

    rows = []
    for pair in pairs:
        for _ in range(repeats):
            res = register(pair.source, pair.target, cfg)
            rows.append({"pair_id": pair.pair_id, "method": "register", "wall_ms": 1e3 * res.wall_s,
                         "final_ssd": res.final_ssd, "min_detjac": res.min_detjac})
            pred = predict(pair.source, pair.target, weights, cfg)
            rows.append({"pair_id": pair.pair_id, "method": "predict", "wall_ms": 1e3 * pred.wall_s,
                         "final_ssd": pred.ssd_after, "min_detjac": pred.min_detjac})
    medians = {m: statistics.median(r["wall_ms"] for r in rows if r["method"] == m)
               for m in ("register", "predict")}
    report = {"rows": rows, "median_ms": medians, "n_pairs": len(pairs),
              "config_hash": config_hash(cfg), "speedup": medians["register"] / medians["predict"]}
    if out is not None:
        write_csv(out, rows)
    return report


def write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        wr.writeheader()
        wr.writerows(rows)


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def evaluate_predictions(examples, weights, cfg) -> list:
    """Per-example SSD, Dice and DetJac of predicted deformations."""
    from .dualnet import predict
    from .shooting import warp_labels

    rows = []
    for ex in examples:
        pred = predict(ex.source, ex.target, weights, cfg)
        row = {"pair_id": ex.pair_id, "method": "predict", "wall_ms": 1e3 * pred.wall_s,
               "initial_ssd": pred.ssd_before, "final_ssd": pred.ssd_after,
               "min_detjac": pred.min_detjac}
        if ex.source_mask is not None and ex.target_mask is not None:
            warped = warp_labels(ex.source_mask, pred.deformation, 3)
            rep = dice(warped, ex.target_mask, labels=(1, 2))
            row["dice_mean"] = rep.mean
            row.update({f"dice_{k}": v for k, v in rep.per_label.items()})
        rows.append(row)
    return rows
