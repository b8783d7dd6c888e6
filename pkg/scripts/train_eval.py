"""Train the twin network on the cached corpus and score it on the test split.

Compares predicted deformations with the optimizer labels (SSD, Dice of the
propagated masks, folding) for one or both input modes.

    python scripts/train_eval.py --epochs 300 --modes stacked planes
"""
import argparse
import json
import statistics

import numpy as np

from bandreg.corpus import CorpusConfig, cached
from bandreg.dualnet import TrainConfig, train
from bandreg.metrics import dice, evaluate_predictions
from bandreg.shooting import shoot, to_deformation, warp_labels


def optimizer_rows(examples, cfg):
    rows = []
    for ex in examples:
        psi = to_deformation(shoot(ex.v_opt, cfg.operator(), cfg.steps).displacement, ex.source.shape)
        rows.append({"final_ssd": ex.diagnostics["final_ssd"], "min_detjac": ex.diagnostics["min_detjac"],
                     "dice_mean": dice(warp_labels(ex.source_mask, psi, 3), ex.target_mask, (1, 2)).mean,
                     "wall_ms": 1e3 * ex.diagnostics["wall_s"]})
    return rows


def summary(rows):
    return {"final_ssd": float(np.mean([r["final_ssd"] for r in rows])),
            "dice": float(np.mean([r["dice_mean"] for r in rows])),
            "positive_detjac": float(np.mean([r["min_detjac"] > 0 for r in rows])),
            "median_ms": statistics.median(r["wall_ms"] for r in rows)}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--lam", type=float, default=1e-6)
    ap.add_argument("--modes", nargs="+", default=["stacked"], choices=["stacked", "planes"])
    args = ap.parse_args()
    corpus = CorpusConfig()
    ds = cached(corpus)
    test = ds.subset("test")
    results = {"optimizer": summary(optimizer_rows(test, corpus.reg))}
    for mode in args.modes:
        tcfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, lam=args.lam,
                           optimizer="momentum", input_mode=mode)
        w, hist = train(ds.subset("train"), tcfg, ds.subset("val"))
        results[mode] = summary(evaluate_predictions(test, w, corpus.reg))
        results[mode]["final_train_loss"] = hist.train_loss[-1]
        results[mode]["final_val_loss"] = hist.val_loss[-1] if hist.val_loss else None
        results[mode]["train_s"] = hist.wall_s
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
