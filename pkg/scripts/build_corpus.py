"""Build (or load) the cached desk-scale corpus and export it as a dataset directory.

    python scripts/build_corpus.py --out runs/corpus --workers 4
"""
import argparse
import logging
from pathlib import Path

from bandreg.corpus import CorpusConfig, cached
from bandreg.fileio import save_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=None, help="also write the dataset here")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--pairs", type=int, default=CorpusConfig.n_pairs)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cfg = CorpusConfig(n_pairs=args.pairs)
    ds = cached(cfg, workers=args.workers)
    rejected = ds.provenance["rejected"]
    print(f"corpus {cfg.key}: {len(ds.examples)} accepted, {len(rejected)} rejected")
    for name, idx in sorted(ds.split.items()):
        print(f"  {name}: {len(idx)}")
    if args.out:
        save_dataset(args.out, ds)


if __name__ == "__main__":
    main()
